//! Encoders, decoder, classifier tail, teacher, and the bundle tying them to
//! the entropy bottleneck.

pub mod arch;
pub mod bundle;
pub mod codec;
pub mod layers;

pub use arch::{mac_breakdown, ArchConfig, Classifier, Decoder, Encoder, EncoderKind, MacBreakdown, Teacher};
pub use bundle::{ModelBundle, TeacherModel};
pub use codec::{classify_latent, compress, compress_batch, decompress, decompress_with, encode_latent, Compressed};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check, random_tensor, GradCheckConfig};
    use crate::nn::params::ParamStore;
    use crate::nn::Graph;
    use crate::tensor::Tensor;
    use crate::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: EncoderKind, s: usize, n: usize) -> ArchConfig {
        ArchConfig {
            patch_size: s,
            num_res_blocks: n,
            enc_width: 8,
            bottleneck_ch: 6,
            dec_width: 8,
            classes: 10,
            input_hw: [32, 32],
            encoder_kind: kind,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Deep compositions accumulate f32 rounding noise in the forward pass;
    /// a wider step keeps it below the truncation error.
    fn composite_cfg() -> GradCheckConfig {
        GradCheckConfig {
            step: 1e-2,
            ..GradCheckConfig::default()
        }
    }

    fn images(b: usize, seed: u64) -> Tensor {
        random_tensor(&[b, 3, 32, 32], 1.0, &mut rng(seed))
    }

    #[test]
    fn config_validation() {
        assert!(ArchConfig::default().validate().is_ok());
        let mut c = ArchConfig::default();
        c.patch_size = 6;
        assert!(c.validate().is_err());
        let mut c = ArchConfig::default();
        c.encoder_kind = EncoderKind::Baseline5x5;
        assert!(c.validate().is_err());
        c.patch_size = 4;
        assert!(c.validate().is_ok());
        let mut c = ArchConfig::default();
        c.input_hw = [36, 32];
        assert!(c.validate().is_err());
        let mut c = ArchConfig::default();
        c.dec_width = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_field_names() {
        let v = serde_json::to_value(ArchConfig::default()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "bottleneck_ch",
                "classes",
                "dec_width",
                "enc_width",
                "encoder_kind",
                "input_hw",
                "num_res_blocks",
                "patch_size"
            ]
        );
        assert_eq!(v["encoder_kind"], "proposed");
        let b: ArchConfig =
            serde_json::from_str(&v.to_string().replace("proposed", "baseline5x5")).unwrap();
        assert_eq!(b.encoder_kind, EncoderKind::Baseline5x5);
    }

    #[test]
    fn shape_chain() {
        let mut cfg = ArchConfig::default();
        cfg.num_res_blocks = 0;
        let b = ModelBundle::new(cfg.clone(), 1).unwrap();
        let y = encode_latent(&b, &images(2, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 48, 4, 4]);
        let mut g = Graph::inference(&b.store);
        let yv = g.input(y);
        let f = b.decoder.forward(&mut g, yv).unwrap();
        assert_eq!(g.value(f).shape(), &[2, 64, 8, 8]);
        let l = b.classifier.forward(&mut g, f).unwrap();
        assert_eq!(g.value(l).shape(), &[2, 10]);

        let t = TeacherModel::new(cfg, 2).unwrap();
        let mut g = Graph::inference(&t.store);
        let x = g.input(images(2, 1));
        let (stem, logits) = t.net.forward(&mut g, x).unwrap();
        assert_eq!(g.value(stem).shape(), &[2, 64, 8, 8]);
        assert_eq!(g.value(logits).shape(), &[2, 10]);
    }

    #[test]
    fn baseline_latent_is_quarter_resolution() {
        let b = ModelBundle::new(small(EncoderKind::Baseline5x5, 4, 0), 3).unwrap();
        let y = encode_latent(&b, &images(1, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 6, 8, 8]);
        let l = classify_latent(&b, &y).unwrap();
        assert_eq!(l.shape(), &[1, 10]);
    }

    #[test]
    fn stride4_proposed_decoder_skips_upsample() {
        let b = ModelBundle::new(small(EncoderKind::Proposed, 4, 1), 3).unwrap();
        assert!(!b.decoder.upsample);
        let y = encode_latent(&b, &images(1, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 6, 8, 8]);
        let mut g = Graph::inference(&b.store);
        let yv = g.input(y);
        let f = b.decoder.forward(&mut g, yv).unwrap();
        assert_eq!(g.value(f).shape(), &[1, 8, 8, 8]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let b = ModelBundle::new(small(EncoderKind::Proposed, 8, 0), 3).unwrap();
        let bad = random_tensor(&[1, 3, 16, 16], 1.0, &mut rng(0));
        assert!(matches!(encode_latent(&b, &bad), Err(Error::Config(_))));
        let bad_latent = Tensor::zeros(&[1, 5, 4, 4]);
        assert!(classify_latent(&b, &bad_latent).is_err());
    }

    #[test]
    fn encoder_macs_grow_with_depth_and_undercut_baseline() {
        let macs: Vec<u64> = [0, 4, 8]
            .iter()
            .map(|&n| {
                let mut c = ArchConfig::default();
                c.num_res_blocks = n;
                mac_breakdown(&c).unwrap().encoder
            })
            .collect();
        assert!(macs[0] < macs[1] && macs[1] < macs[2], "{macs:?}");
        let mut base = ArchConfig::default();
        base.encoder_kind = EncoderKind::Baseline5x5;
        base.patch_size = 4;
        assert!(macs[1] < mac_breakdown(&base).unwrap().encoder);
    }

    #[test]
    fn patch_embedding_equals_patch_matmul() {
        let s = 8;
        let mut store = ParamStore::new();
        let conv = layers::Conv::build(&mut store, "p", 3, 5, s, s, 0, &mut rng(4)).unwrap();
        for v in store.tensor_mut(conv.bias).data_mut() {
            *v = 0.25;
        }
        let x = random_tensor(&[1, 3, 32, 32], 1.0, &mut rng(5));
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let out = conv.forward(&mut g, xv).unwrap();
        let out = g.value(out);
        let w = store.tensor(conv.weight).data();
        let xd = x.data();
        for o in 0..5 {
            for py in 0..4 {
                for px in 0..4 {
                    let mut acc = 0.25f64;
                    for c in 0..3 {
                        for ky in 0..s {
                            for kx in 0..s {
                                let wi = ((o * 3 + c) * s + ky) * s + kx;
                                let xi = (c * 32 + py * s + ky) * 32 + px * s + kx;
                                acc += w[wi] as f64 * xd[xi] as f64;
                            }
                        }
                    }
                    let got = out.data()[(o * 4 + py) * 4 + px] as f64;
                    assert!((got - acc).abs() <= 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let mut store = ParamStore::new();
        let block = layers::ResBlock::build(&mut store, "r", 4, &mut rng(1)).unwrap();
        for id in [block.conv1.weight, block.conv1.bias, block.conv2.weight, block.conv2.bias] {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
        for shape in [[1, 4, 3, 5], [2, 4, 8, 8]] {
            let x = random_tensor(&shape, 1.0, &mut rng(2));
            let mut g = Graph::inference(&store);
            let xv = g.input(x.clone());
            let y = block.forward(&mut g, xv).unwrap();
            assert_eq!(g.value(y), &x);
        }
    }

    #[test]
    fn residual_block_rejects_channel_mismatch() {
        let mut store = ParamStore::new();
        let block = layers::ResBlock::build(&mut store, "r", 4, &mut rng(1)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(block.forward(&mut g, x).is_err());
    }

    #[test]
    fn residual_block_gradcheck() {
        let mut store = ParamStore::new();
        let block = layers::ResBlock::build(&mut store, "r", 1, &mut rng(7)).unwrap();
        // lift the branch so its gradient is not dominated by the skip path
        for v in store.tensor_mut(block.conv2.weight).data_mut() {
            *v *= 10.0;
        }
        let x = random_tensor(&[1, 1, 4, 4], 1.0, &mut rng(8));
        let params: Vec<Tensor> = [block.conv1.weight, block.conv1.bias, block.conv2.weight, block.conv2.bias]
            .iter()
            .map(|&id| store.tensor(id).clone())
            .collect();
        let mut inputs = vec![x];
        inputs.extend(params);
        let report = check(&inputs, &[true; 5], composite_cfg(), |g, v| {
            let h = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            let h = g.gelu(h)?;
            let h = g.conv2d(h, v[3], v[4], 1, 1)?;
            g.add(v[0], h)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-3, "{report:?}");
    }

    #[test]
    fn decoder_is_deterministic_and_passes_gradcheck() {
        let cfg = ArchConfig {
            bottleneck_ch: 2,
            dec_width: 2,
            ..small(EncoderKind::Proposed, 8, 0)
        };
        let b = ModelBundle::new(cfg, 9).unwrap();
        let y = random_tensor(&[1, 2, 4, 4], 2.0, &mut rng(10));
        let run = || {
            let mut g = Graph::inference(&b.store);
            let yv = g.input(y.clone());
            let f = b.decoder.forward(&mut g, yv).unwrap();
            g.value(f).clone()
        };
        assert_eq!(run(), run());

        let report = check(&[y.clone()], &[true], composite_cfg(), |g, v| {
            // the closure graph has no store; rebuild the decoder on leaves
            let mut h = v[0];
            let dec = &b.decoder;
            let p = |g: &mut Graph, id| g.leaf(b.store.tensor(id).clone(), false);
            let conv = |g: &mut Graph, c: &layers::Conv, x| {
                let (w, bias) = (p(g, c.weight), p(g, c.bias));
                g.conv2d(x, w, bias, c.stride, c.pad)
            };
            let block = |g: &mut Graph, r: &layers::ResBlock, x| -> crate::Result<_> {
                let t = conv(g, &r.conv1, x)?;
                let t = g.gelu(t)?;
                let t = conv(g, &r.conv2, t)?;
                g.add(x, t)
            };
            h = conv(g, &dec.input, h)?;
            h = block(g, &dec.pre[0], h)?;
            h = block(g, &dec.pre[1], h)?;
            h = g.upsample2x(h)?;
            h = conv(g, &dec.refine, h)?;
            block(g, &dec.post, h)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-3, "{report:?}");
    }

    #[test]
    fn zero_classifier_weights_give_bias_logits() {
        let mut b = ModelBundle::new(small(EncoderKind::Proposed, 8, 0), 1).unwrap();
        let bias = b.classifier.head.bias;
        let ids: Vec<_> = b
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("classifier."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            b.store.tensor_mut(id).data_mut().fill(0.0);
        }
        let bias_vals: Vec<f32> = (0..10).map(|i| i as f32 * 0.1).collect();
        b.store.tensor_mut(bias).data_mut().copy_from_slice(&bias_vals);
        let feat = random_tensor(&[1, 8, 8, 8], 1.0, &mut rng(3));
        let mut g = Graph::inference(&b.store);
        let f = g.input(feat);
        let l = b.classifier.forward(&mut g, f).unwrap();
        assert_eq!(g.value(l).data(), &bias_vals[..]);
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let b = ModelBundle::new(small(EncoderKind::Proposed, 8, 1), 1).unwrap();
        let y = encode_latent(&b, &images(3, 4)).unwrap();
        let logits = classify_latent(&b, &y).unwrap();
        for row in logits.data().chunks(10) {
            let m = row.iter().cloned().fold(f32::MIN, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            let total: f64 = row.iter().map(|&v| (v as f64 - m).exp() / z).sum();
            assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn digest_tracks_weights_and_survives_reload() {
        let b = ModelBundle::new(small(EncoderKind::Proposed, 8, 1), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        b.save(&path).unwrap();
        let r1 = ModelBundle::load(&path).unwrap();
        let r2 = ModelBundle::load(&path).unwrap();
        assert_eq!(r1.digest(), r2.digest());
        assert_eq!(r1.digest(), b.digest());
        let mut p = r1.clone();
        let id = p.decoder.refine.weight;
        p.store.tensor_mut(id).data_mut()[0] += 1e-3;
        assert_ne!(p.digest(), b.digest());
    }

    #[test]
    fn teacher_checkpoint_round_trip_and_role_check() {
        let cfg = small(EncoderKind::Proposed, 8, 0);
        let t = TeacherModel::new(cfg.clone(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        t.save(&path).unwrap();
        let back = TeacherModel::load(&path).unwrap();
        assert_eq!(back.store.bytes_with_prefix(""), t.store.bytes_with_prefix(""));
        assert!(matches!(ModelBundle::load(&path), Err(Error::Format(_))));

        let mut b = ModelBundle::new(cfg, 1).unwrap();
        b.attach_teacher(&back).unwrap();
        b.init_classifier_from(&back).unwrap();
        assert_eq!(
            b.store.bytes_with_prefix("classifier."),
            t.store.bytes_with_prefix("teacher.tail.")
        );
        assert_eq!(b.store.bytes_with_prefix("teacher."), t.store.bytes_with_prefix("teacher."));
        assert!(b
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("teacher."))
            .all(|(_, p)| !p.trainable));
        // teacher weights are not part of the student checkpoint or digest
        let before = b.digest();
        let id = b.store.id("teacher.stem1.weight").unwrap();
        b.store.tensor_mut(id).data_mut()[0] += 1.0;
        assert_eq!(b.digest(), before);
    }

    #[test]
    fn compress_round_trip_matches_local_rounding() {
        let mut b = ModelBundle::new(small(EncoderKind::Proposed, 8, 1), 6).unwrap();
        b.freeze_tables().unwrap();
        let img = images(1, 9).index0(0);
        let cf = compress(&b, &img).unwrap();
        assert_eq!((cf.header.channels, cf.header.h_lat, cf.header.w_lat), (6, 4, 4));
        assert_eq!((cf.header.img_h, cf.header.img_w), (32, 32));
        assert_eq!(cf.header.digest, b.digest());
        let yhat = decompress(&b, &cf).unwrap();
        let y = encode_latent(&b, &img.clone().unsqueeze0()).unwrap();
        let tables = b.tables().unwrap();
        let expect: Vec<f32> = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let t = &tables[i / 16];
                (v.round() as i32).clamp(t.y_min, t.y_max()) as f32
            })
            .collect();
        assert_eq!(yhat.data(), &expect[..]);
        // determinism
        assert_eq!(compress(&b, &img).unwrap(), cf);
        let back = crate::entropy::CompressedFeature::from_bytes(&cf.to_bytes()).unwrap();
        assert_eq!(back, cf);
    }

    #[test]
    fn decompress_rejects_foreign_digest_and_missing_tables() {
        let mut b = ModelBundle::new(small(EncoderKind::Proposed, 8, 0), 6).unwrap();
        let img = images(1, 9).index0(0);
        assert!(matches!(compress(&b, &img), Err(Error::Config(_))));
        b.freeze_tables().unwrap();
        let mut cf = compress(&b, &img).unwrap();
        cf.header.digest[0] ^= 1;
        assert!(matches!(decompress(&b, &cf), Err(Error::IncompatibleModel { .. })));
    }

    #[test]
    fn tables_survive_checkpoint() {
        let mut b = ModelBundle::new(small(EncoderKind::Proposed, 8, 0), 6).unwrap();
        b.freeze_tables().unwrap();
        b.provenance.insert("lambda".into(), 1.0.into());
        let back = ModelBundle::from_checkpoint(
            crate::nn::checkpoint::Checkpoint::from_bytes(&b.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.tables, b.tables);
        assert_eq!(back.provenance, b.provenance);
    }
}
