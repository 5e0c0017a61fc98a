use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use crate::entropy::table::{freeze, CdfTable};
use crate::entropy::{Digest, FactorizedPrior};
use crate::error::{Error, Result};
use crate::models::arch::{mac_breakdown, ArchConfig, Classifier, Decoder, Encoder, MacBreakdown, Teacher};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::params::ParamStore;

pub const ENCODER: &str = "encoder";
pub const PRIOR: &str = "prior";
pub const DECODER: &str = "decoder";
pub const CLASSIFIER: &str = "classifier";
pub const TEACHER: &str = "teacher";

pub const PRIOR_HIDDEN: [usize; 3] = [3, 3, 3];
pub const PRIOR_INIT_SCALE: f64 = 10.0;

const ROLE_KEY: &str = "role";
const TABLES_KEY: &str = "cdf_tables";
const PROVENANCE_KEY: &str = "train";

fn under(prefix: &str) -> String {
    format!("{prefix}.")
}

fn is_student(name: &str) -> bool {
    [ENCODER, PRIOR, DECODER, CLASSIFIER]
        .iter()
        .any(|p| name.starts_with(&under(p)))
}

/// Overwrites every parameter selected by `keep` with the checkpoint's
/// values; the checkpoint must hold exactly that set.
fn restore(store: &mut ParamStore, ckpt: Checkpoint, keep: impl Fn(&str) -> bool) -> Result<()> {
    let expected = store.iter().filter(|(_, p)| keep(&p.name)).count();
    let mut seen = 0;
    for (name, t) in ckpt.tensors {
        let id = store
            .id(&name)
            .filter(|_| keep(&name))
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} does not belong to this model")))?;
        let dst = store.tensor_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        seen += 1;
    }
    if seen != expected {
        return Err(Error::Format(format!("checkpoint holds {seen} of {expected} tensors")));
    }
    Ok(())
}

fn check_role(ckpt: &Checkpoint, role: &str) -> Result<ArchConfig> {
    let found = ckpt.header.aux.get(ROLE_KEY).and_then(|v| v.as_str()).unwrap_or("");
    if found != role {
        return Err(Error::Format(format!("expected a {role} checkpoint, found {found:?}")));
    }
    let cfg: ArchConfig = serde_json::from_value(ckpt.header.arch.clone())
        .map_err(|e| Error::Format(format!("checkpoint arch: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A stand-alone teacher network with its own checkpoint.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    pub config: ArchConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub net: Teacher,
}

impl TeacherModel {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Teacher::build(&mut store, TEACHER, &config, &mut rng)?;
        Ok(TeacherModel { config, seed, store, net })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let tensors = self.store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect();
        let mut ckpt = Checkpoint::new(serde_json::to_value(&self.config)?, self.seed, tensors);
        ckpt.header.aux.insert(ROLE_KEY.into(), TEACHER.into());
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = check_role(&ckpt, TEACHER)?;
        let mut model = TeacherModel::new(config, ckpt.header.seed)?;
        restore(&mut model.store, ckpt, |_| true)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Edge encoder, entropy bottleneck, cloud decoder and classifier sharing one
/// parameter store, plus an optional frozen teacher used during training.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ArchConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub prior: FactorizedPrior,
    pub decoder: Decoder,
    pub classifier: Classifier,
    pub teacher: Option<Teacher>,
    pub tables: Option<Vec<CdfTable>>,
    /// Free-form training metadata written to the checkpoint.
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

impl ModelBundle {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&mut store, ENCODER, &config, &mut rng)?;
        let prior = FactorizedPrior::build(
            &mut store,
            PRIOR,
            config.bottleneck_ch,
            &PRIOR_HIDDEN,
            PRIOR_INIT_SCALE,
            &mut rng,
        )?;
        let decoder = Decoder::build(&mut store, DECODER, &config, &mut rng)?;
        let classifier = Classifier::build(&mut store, CLASSIFIER, &config, &mut rng)?;
        Ok(ModelBundle {
            config,
            seed,
            store,
            encoder,
            prior,
            decoder,
            classifier,
            teacher: None,
            tables: None,
            provenance: serde_json::Map::new(),
        })
    }

    /// Copies a trained teacher into the bundle as frozen parameters.
    pub fn attach_teacher(&mut self, teacher: &TeacherModel) -> Result<()> {
        let t = &teacher.config;
        let c = &self.config;
        if (t.dec_width, t.classes, t.input_hw) != (c.dec_width, c.classes, c.input_hw) {
            return Err(Error::Config(
                "teacher and student disagree on dec_width, classes or input size".into(),
            ));
        }
        if self.teacher.is_none() {
            let mut rng = ChaCha8Rng::seed_from_u64(teacher.seed);
            self.teacher = Some(Teacher::build(&mut self.store, TEACHER, c, &mut rng)?);
        }
        let prefix = under(TEACHER);
        self.store.copy_prefix_from(&teacher.store, &prefix, &prefix)?;
        self.store.set_trainable(&prefix, false);
        Ok(())
    }

    /// Initializes the student classifier from the teacher's tail.
    pub fn init_classifier_from(&mut self, teacher: &TeacherModel) -> Result<()> {
        let n = self.store.copy_prefix_from(
            &teacher.store,
            &format!("{TEACHER}.tail."),
            &under(CLASSIFIER),
        )?;
        if n == 0 {
            return Err(Error::Config("teacher has no tail parameters".into()));
        }
        Ok(())
    }

    pub fn teacher(&self) -> Result<&Teacher> {
        self.teacher
            .as_ref()
            .ok_or_else(|| Error::Config("operation needs a teacher but none is attached".into()))
    }

    /// SHA-256 over the config JSON and every student parameter, truncated
    /// to 16 bytes.
    pub fn digest(&self) -> Digest {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (_, p) in self.store.iter().filter(|(_, p)| is_student(&p.name)) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        let full = h.finalize();
        let mut d = [0u8; 16];
        d.copy_from_slice(&full[..16]);
        d
    }

    pub fn freeze_tables(&mut self) -> Result<()> {
        self.tables = Some(freeze(&self.prior, &self.store)?);
        Ok(())
    }

    pub fn tables(&self) -> Result<&[CdfTable]> {
        self.tables
            .as_deref()
            .ok_or_else(|| Error::Config("entropy tables have not been frozen".into()))
    }

    pub fn macs(&self) -> Result<MacBreakdown> {
        mac_breakdown(&self.config)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let tensors = self
            .store
            .iter()
            .filter(|(_, p)| is_student(&p.name))
            .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
            .collect();
        let mut ckpt = Checkpoint::new(serde_json::to_value(&self.config)?, self.seed, tensors);
        let aux = &mut ckpt.header.aux;
        aux.insert(ROLE_KEY.into(), "student".into());
        if let Some(t) = &self.tables {
            aux.insert(TABLES_KEY.into(), serde_json::to_value(t)?);
        }
        if !self.provenance.is_empty() {
            aux.insert(PROVENANCE_KEY.into(), self.provenance.clone().into());
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint) -> Result<Self> {
        let config = check_role(&ckpt, "student")?;
        let mut b = ModelBundle::new(config, ckpt.header.seed)?;
        if let Some(v) = ckpt.header.aux.remove(TABLES_KEY) {
            let tables: Vec<CdfTable> =
                serde_json::from_value(v).map_err(|e| Error::Format(format!("cdf tables: {e}")))?;
            if tables.len() != b.config.bottleneck_ch {
                return Err(Error::Format(format!(
                    "{} cdf tables for {} channels",
                    tables.len(),
                    b.config.bottleneck_ch
                )));
            }
            for t in &tables {
                t.validate()?;
            }
            b.tables = Some(tables);
        }
        if let Some(serde_json::Value::Object(m)) = ckpt.header.aux.remove(PROVENANCE_KEY) {
            b.provenance = m;
        }
        restore(&mut b.store, ckpt, is_student)?;
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}
