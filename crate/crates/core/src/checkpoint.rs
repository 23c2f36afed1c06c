//! Checkpoint container: a JSON manifest (name, shape, role per parameter,
//! plus config and RNG state) followed by row-major little-endian f32 data.
//! Training checkpoints carry optimizer moments and the batch-stream cursor,
//! so a resumed run replays bit-exactly from an iteration boundary.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critics::{StyleCriticConfig, StyleDiscriminator, TextCriticConfig, TextDiscriminator};
use crate::data::Vocabulary;
use crate::model::{MssrNet, MssrNetConfig};
use crate::params::{AdamConfig, ParameterStore, Role};
use crate::teacher::{TeacherConfig, TeacherModel};
use crate::tensor::Real;
use crate::training::{LossWeights, PhaseCounters, TrainSchedule, TrainSetup, Trainer};

const MAGIC: &[u8; 8] = b"MSSRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

impl From<serde_json::Error> for CheckpointError {
    fn from(e: serde_json::Error) -> Self {
        CheckpointError::Format(e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamManifest {
    name: String,
    role: Role,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct SectionManifest {
    name: String,
    with_optimizer: bool,
    params: Vec<ParamManifest>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    sections: Vec<SectionManifest>,
}

#[derive(Serialize, Deserialize)]
struct TeacherMeta {
    cfg: TeacherConfig,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TrainingMeta {
    vocab: Vec<String>,
    model_cfg: MssrNetConfig,
    schedule: TrainSchedule,
    weights: LossWeights,
    adam: AdamConfig,
    iteration: usize,
    counters: PhaseCounters,
    stream_epoch: u64,
    stream_pos: usize,
    rng_seed: [u8; 32],
    rng_word_pos_lo: u64,
    rng_word_pos_hi: u64,
    teacher_vocab: usize,
    teacher_styles: usize,
}

fn write_section<F: Real, W: Write>(
    out: &mut W,
    store: &ParameterStore<F>,
    with_optimizer: bool,
) -> Result<(), CheckpointError> {
    for (id, entry) in store.entries() {
        for v in &entry.values {
            out.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
        if with_optimizer {
            let (m, v, step) = store.optim_state(id);
            for x in m {
                out.write_all(&(x.to_f64() as f32).to_le_bytes())?;
            }
            for x in v {
                out.write_all(&(x.to_f64() as f32).to_le_bytes())?;
            }
            out.write_all(&step.to_le_bytes())?;
        }
    }
    Ok(())
}

fn section_manifest<F: Real>(name: &str, store: &ParameterStore<F>, with_optimizer: bool) -> SectionManifest {
    SectionManifest {
        name: name.to_string(),
        with_optimizer,
        params: store
            .entries()
            .map(|(_, e)| ParamManifest {
                name: e.name.clone(),
                role: e.role,
                rows: e.rows,
                cols: e.cols,
            })
            .collect(),
    }
}

fn read_f32s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f32>, CheckpointError> {
    let mut buf = vec![0u8; count * 4];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_section<F: Real, R: Read>(
    input: &mut R,
    manifest: &SectionManifest,
    store: &mut ParameterStore<F>,
) -> Result<(), CheckpointError> {
    for pm in &manifest.params {
        let id = store.id_by_name(&pm.name).ok_or_else(|| {
            CheckpointError::Mismatch(format!("parameter `{}` missing from the target model", pm.name))
        })?;
        let entry = store.get(id);
        if entry.rows != pm.rows || entry.cols != pm.cols {
            return Err(CheckpointError::Mismatch(format!(
                "parameter `{}` shape {}×{} vs checkpoint {}×{}",
                pm.name, entry.rows, entry.cols, pm.rows, pm.cols
            )));
        }
        let n = pm.rows * pm.cols;
        let values = read_f32s(input, n)?;
        store.set_values(id, values.iter().map(|&x| F::from_f64(x as f64)).collect());
        if manifest.with_optimizer {
            let m = read_f32s(input, n)?;
            let v = read_f32s(input, n)?;
            let mut step_buf = [0u8; 8];
            input.read_exact(&mut step_buf)?;
            store.set_optim_state(
                id,
                m.iter().map(|&x| F::from_f64(x as f64)).collect(),
                v.iter().map(|&x| F::from_f64(x as f64)).collect(),
                u64::from_le_bytes(step_buf),
            );
        }
    }
    Ok(())
}

fn write_file(path: &Path, header: &Header, body: &[u8]) -> Result<(), CheckpointError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let header_bytes = serde_json::to_vec(header)?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    out.write_all(body)?;
    out.flush()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Header, Vec<u8>), CheckpointError> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 4];
    input.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    Ok((header, body))
}

// ---- teacher checkpoints ----

pub fn save_teacher<F: Real>(
    path: &Path,
    teacher: &TeacherModel<F>,
    vocab: &Vocabulary,
) -> Result<(), CheckpointError> {
    let meta = TeacherMeta {
        cfg: teacher.cfg,
        vocab: (0..vocab.size()).map(|i| vocab.token(i).to_string()).collect(),
    };
    let header = Header {
        kind: "teacher".into(),
        config: serde_json::to_value(&meta)?,
        sections: vec![section_manifest("teacher", &teacher.store, false)],
    };
    let mut body = Vec::new();
    write_section(&mut body, &teacher.store, false)?;
    write_file(path, &header, &body)
}

pub fn load_teacher<F: Real>(path: &Path) -> Result<(TeacherModel<F>, Vocabulary), CheckpointError> {
    let (header, body) = read_file(path)?;
    if header.kind != "teacher" {
        return Err(CheckpointError::Format(format!("expected teacher checkpoint, found `{}`", header.kind)));
    }
    let meta: TeacherMeta = serde_json::from_value(header.config)?;
    let mut teacher = TeacherModel::new(meta.cfg, 0);
    let mut cursor = std::io::Cursor::new(body);
    let section = header
        .sections
        .first()
        .ok_or_else(|| CheckpointError::Format("teacher checkpoint has no sections".into()))?;
    read_section(&mut cursor, section, &mut teacher.store)?;
    Ok((teacher, Vocabulary::from_tokens(meta.vocab)))
}

// ---- training checkpoints ----

pub fn save_training_checkpoint<F: Real>(
    path: &Path,
    trainer: &Trainer<F>,
    setup: &TrainSetup<F>,
) -> Result<(), CheckpointError> {
    let word_pos = trainer.rng.get_word_pos();
    let vocab = &setup.train.vocab;
    let meta = TrainingMeta {
        vocab: (0..vocab.size()).map(|i| vocab.token(i).to_string()).collect(),
        model_cfg: trainer.model.cfg,
        schedule: *trainer.schedule(),
        weights: *trainer.weights(),
        adam: *trainer.adam(),
        iteration: trainer.iteration,
        counters: trainer.counters,
        stream_epoch: trainer.stream_epoch,
        stream_pos: trainer.stream_pos,
        rng_seed: trainer.rng.get_seed(),
        rng_word_pos_lo: word_pos as u64,
        rng_word_pos_hi: (word_pos >> 64) as u64,
        teacher_vocab: setup.teacher.cfg.vocab_size,
        teacher_styles: setup.teacher.cfg.styles,
    };
    let header = Header {
        kind: "training".into(),
        config: serde_json::to_value(&meta)?,
        sections: vec![
            section_manifest("model", &trainer.model.store, true),
            section_manifest("style_critic", &trainer.style_critic.store, true),
            section_manifest("text_critic", &trainer.text_critic.store, true),
        ],
    };
    let mut body = Vec::new();
    write_section(&mut body, &trainer.model.store, true)?;
    write_section(&mut body, &trainer.style_critic.store, true)?;
    write_section(&mut body, &trainer.text_critic.store, true)?;
    write_file(path, &header, &body)
}

pub struct LoadedTraining<F: Real> {
    pub vocab: Vocabulary,
    pub model: MssrNet<F>,
    pub style_critic: StyleDiscriminator<F>,
    pub text_critic: TextDiscriminator<F>,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub iteration: usize,
    pub counters: PhaseCounters,
    pub stream_epoch: u64,
    pub stream_pos: usize,
    pub rng: ChaCha8Rng,
    pub teacher_vocab: usize,
    pub teacher_styles: usize,
}

pub fn load_training_checkpoint<F: Real>(path: &Path) -> Result<LoadedTraining<F>, CheckpointError> {
    let (header, body) = read_file(path)?;
    if header.kind != "training" {
        return Err(CheckpointError::Format(format!(
            "expected training checkpoint, found `{}`",
            header.kind
        )));
    }
    let meta: TrainingMeta = serde_json::from_value(header.config)?;
    if header.sections.len() != 3 {
        return Err(CheckpointError::Format("training checkpoint needs 3 sections".into()));
    }
    let mut model = MssrNet::new(meta.model_cfg, 0);
    let mut style_critic = StyleDiscriminator::new(
        StyleCriticConfig::new(meta.model_cfg.d_style, meta.model_cfg.styles, meta.model_cfg.heads),
        0,
    );
    let mut text_critic = TextDiscriminator::new(
        TextCriticConfig::new(
            meta.model_cfg.d_model,
            meta.model_cfg.styles,
            meta.model_cfg.heads,
            meta.model_cfg.max_len + meta.model_cfg.decode_margin + 1,
        ),
        0,
    );
    let mut cursor = std::io::Cursor::new(body);
    read_section(&mut cursor, &header.sections[0], &mut model.store)?;
    read_section(&mut cursor, &header.sections[1], &mut style_critic.store)?;
    read_section(&mut cursor, &header.sections[2], &mut text_critic.store)?;

    let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
    rng.set_word_pos(((meta.rng_word_pos_hi as u128) << 64) | meta.rng_word_pos_lo as u128);

    Ok(LoadedTraining {
        vocab: Vocabulary::from_tokens(meta.vocab),
        model,
        style_critic,
        text_critic,
        schedule: meta.schedule,
        weights: meta.weights,
        adam: meta.adam,
        iteration: meta.iteration,
        counters: meta.counters,
        stream_epoch: meta.stream_epoch,
        stream_pos: meta.stream_pos,
        rng,
        teacher_vocab: meta.teacher_vocab,
        teacher_styles: meta.teacher_styles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::StackConfig;
    use tempfile::tempdir;

    #[test]
    fn teacher_roundtrip_is_bit_exact() {
        let cfg = TeacherConfig {
            stack: StackConfig {
                layers: 2,
                d_model: 8,
                d_ff: 16,
                heads: 2,
                dropout: 0.1,
            },
            vocab_size: 30,
            max_len: 12,
            styles: 2,
        };
        let teacher: TeacherModel<f32> = TeacherModel::new(cfg, 42);
        let vocab = Vocabulary::from_tokens((0..30).map(|i| format!("t{i}")).collect());
        let dir = tempdir().unwrap();
        let path = dir.path().join("teacher.ckpt");
        save_teacher(&path, &teacher, &vocab).unwrap();
        let (loaded, loaded_vocab): (TeacherModel<f32>, _) = load_teacher(&path).unwrap();
        assert_eq!(loaded.cfg, teacher.cfg);
        assert_eq!(loaded.store.snapshot(), teacher.store.snapshot());
        assert_eq!(loaded_vocab.size(), vocab.size());
        // predictions identical
        let a = teacher.predict(&[4, 7, 9]);
        let b = loaded.predict(&[4, 7, 9]);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_teacher::<f32>(&path), Err(CheckpointError::BadMagic)));
    }
}
