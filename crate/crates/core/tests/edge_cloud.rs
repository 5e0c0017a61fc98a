use std::net::{SocketAddr, TcpStream};
use std::thread;

use featcomp::data::synth::generate;
use featcomp::data::{make_batch, Dataset, Normalization};
use featcomp::edge::{self, code, read_frame, write_frame, EdgeClient, Frame, FrameType, Server, FRAME_HEADER_LEN};
use featcomp::models::{classify_latent, compress, decompress, ArchConfig, ModelBundle};
use featcomp::{Error, Tensor};

fn bundle(seed: u64) -> ModelBundle {
    let mut cfg = ArchConfig::default();
    cfg.enc_width = 16;
    cfg.dec_width = 16;
    cfg.num_res_blocks = 1;
    let mut b = ModelBundle::new(cfg, seed).unwrap();
    b.freeze_tables().unwrap();
    b
}

fn images(n: usize) -> Vec<Tensor> {
    let data: Dataset = generate(n, 7);
    let norm = Normalization::default();
    (0..n)
        .map(|i| {
            let b = make_batch(&data, &[i], &norm, None).unwrap();
            Tensor::new(&[3, 32, 32], b.images.data().to_vec()).unwrap()
        })
        .collect()
}

fn local_class(b: &ModelBundle, img: &Tensor) -> usize {
    let y = decompress(b, &compress(b, img).unwrap()).unwrap();
    classify_latent(b, &y.unsqueeze0()).unwrap().argmax()
}

fn start(b: ModelBundle, threads: usize) -> (SocketAddr, edge::ShutdownHandle) {
    let server = Server::bind("127.0.0.1:0", b, threads).unwrap();
    let addr = server.local_addr().unwrap();
    let (h, _join) = server.spawn().unwrap();
    (addr, h)
}

#[test]
fn loopback_matches_local_pipeline() {
    let b = bundle(1);
    let (addr, stop) = start(b.clone(), 2);
    let mut client = EdgeClient::connect(addr, &b).unwrap();
    for img in images(100) {
        let (p, t) = client.classify(&img).unwrap();
        assert_eq!(p.class(), local_class(&b, &img));
        let cf = compress(&b, &img).unwrap();
        assert_eq!(t.transfer_bytes, FRAME_HEADER_LEN + cf.byte_len());
        assert!(t.encode_us > 0);
        assert!(p.top.windows(2).all(|w| w[0].1 >= w[1].1));
    }
    stop.shutdown();
}

#[test]
fn digest_mismatch_is_rejected_in_one_frame() {
    let server_bundle = bundle(1);
    let other = bundle(2);
    let (addr, stop) = start(server_bundle, 1);
    match EdgeClient::connect(addr, &other) {
        Err(Error::Remote { code: c, .. }) => assert_eq!(c, code::DIGEST_MISMATCH),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("handshake accepted a foreign digest"),
    }
    let mut s = TcpStream::connect(addr).unwrap();
    write_frame(&mut s, &Frame::new(FrameType::Hello, other.digest().to_vec())).unwrap();
    let f = read_frame(&mut s).unwrap().unwrap();
    assert_eq!((f.kind, f.payload[0]), (FrameType::Error, code::DIGEST_MISMATCH));
    assert!(read_frame(&mut s).unwrap().is_none(), "connection should close");
    stop.shutdown();
}

#[test]
fn malformed_features_keep_the_connection_open() {
    let b = bundle(3);
    let (addr, stop) = start(b.clone(), 1);
    let mut client = EdgeClient::connect(addr, &b).unwrap();
    let img = &images(1)[0];
    let good = compress(&b, img).unwrap().to_bytes();

    let reply = client.exchange(&Frame::new(FrameType::Features, vec![1, 2, 3])).unwrap();
    assert_eq!((reply.kind, reply.payload[0]), (FrameType::Error, code::BAD_FEATURE));

    let mut truncated = good.clone();
    truncated.truncate(good.len() / 2);
    let reply = client.exchange(&Frame::new(FrameType::Features, truncated)).unwrap();
    assert_eq!(reply.kind, FrameType::Error);

    let reply = client.exchange(&Frame::new(FrameType::Prediction, vec![])).unwrap();
    assert_eq!((reply.kind, reply.payload[0]), (FrameType::Error, code::PROTOCOL));

    let (p, _) = client.classify(img).unwrap();
    assert_eq!(p.class(), local_class(&b, img));
    stop.shutdown();
}

#[test]
fn header_mutations_never_decode_silently() {
    let b = bundle(4);
    let (addr, stop) = start(b.clone(), 1);
    let mut client = EdgeClient::connect(addr, &b).unwrap();
    let good = compress(&b, &images(1)[0]).unwrap().to_bytes();
    let header = featcomp::entropy::bitstream::HEADER_LEN;
    for i in 0..header {
        let mut bad = good.clone();
        bad[i] ^= 0x41;
        let reply = client.exchange(&Frame::new(FrameType::Features, bad)).unwrap();
        assert_eq!(reply.kind, FrameType::Error, "mutated header byte {i} was accepted");
    }
    stop.shutdown();
}

#[test]
fn concurrent_clients_agree_with_sequential() {
    let b = bundle(5);
    let imgs = images(24);
    let (addr, stop) = start(b.clone(), 4);
    let sequential: Vec<usize> = {
        let mut c = EdgeClient::connect(addr, &b).unwrap();
        imgs.iter().map(|i| c.classify(i).unwrap().0.class()).collect()
    };
    let results: Vec<Vec<usize>> = thread::scope(|s| {
        let handles: Vec<_> = (0..3)
            .map(|_| {
                s.spawn(|| {
                    let mut c = EdgeClient::connect(addr, &b).unwrap();
                    imgs.iter().map(|i| c.classify(i).unwrap().0.class()).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        assert_eq!(r, sequential);
    }
    stop.shutdown();
}
