//! Differentiable core and the encoder–decoder translator.

pub mod checkpoint;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::losses::TokenLoss;
use crate::scalar::Scalar;
use crate::textproc::{TokenId, Vocabulary};

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use model::{EncodedSource, ModelHyper, PaddedBatch, Seq2SeqModel};
pub use params::{ParamId, Params, Tensor};
pub use tape::{Tape, Var};
pub use train::{fit, AdamW, EncodedPair, LrSchedule, Order, TrainConfig, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: TokenId, vocab: usize },
    #[error("non-finite loss at batch {batch_index}")]
    NonFiniteLoss { batch_index: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vocabulary files written next to a checkpoint.
pub fn vocab_paths(ckpt: &Path) -> (PathBuf, PathBuf) {
    let base = ckpt.as_os_str().to_owned();
    let mut s = base.clone();
    s.push(".src.vocab");
    let mut t = base;
    t.push(".tgt.vocab");
    (PathBuf::from(s), PathBuf::from(t))
}

/// Write the model plus its two vocabularies.
pub fn save_checkpoint<T: Scalar>(
    model: &Seq2SeqModel<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    path: impl AsRef<Path>,
) -> Result<(), NnetError> {
    let path = path.as_ref();
    let ck = Checkpoint {
        kind: CheckpointKind::Translator,
        hyper_json: serde_json::to_string(&model.hyper).expect("hyper serializes"),
        vocab_hashes: vec![src_vocab.content_hash(), tgt_vocab.content_hash()],
        params: model.params.clone(),
    };
    checkpoint::save(&ck, path)?;
    let (sp, tp) = vocab_paths(path);
    src_vocab.save(sp)?;
    tgt_vocab.save(tp)?;
    Ok(())
}

/// Load a translator, verifying it was trained with the given vocabularies.
pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Seq2SeqModel<T>, NnetError> {
    let ck: Checkpoint<T> = checkpoint::load(path)?;
    if ck.kind != CheckpointKind::Translator {
        return Err(NnetError::CorruptCheckpoint(
            "not a translator checkpoint".into(),
        ));
    }
    if ck.vocab_hashes != [src_vocab.content_hash(), tgt_vocab.content_hash()] {
        return Err(NnetError::CorruptCheckpoint(
            "vocabulary hash mismatch".into(),
        ));
    }
    let hyper: ModelHyper = serde_json::from_str(&ck.hyper_json)
        .map_err(|e| NnetError::CorruptCheckpoint(format!("hyper block: {e}")))?;
    if hyper.src_vocab != src_vocab.len() || hyper.tgt_vocab != tgt_vocab.len() {
        return Err(NnetError::CorruptCheckpoint(
            "vocabulary size mismatch".into(),
        ));
    }
    Seq2SeqModel::with_params(hyper, ck.params)
}

/// Load a translator together with the vocabularies stored beside it.
pub fn load_with_vocabs<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(Seq2SeqModel<T>, Vocabulary, Vocabulary), NnetError> {
    let path = path.as_ref();
    let (sp, tp) = vocab_paths(path);
    let corrupt = |e: crate::textproc::TextError| NnetError::CorruptCheckpoint(e.to_string());
    let src = Vocabulary::load(sp).map_err(corrupt)?;
    let tgt = Vocabulary::load(tp).map_err(corrupt)?;
    let model = load_checkpoint(path, &src, &tgt)?;
    Ok((model, src, tgt))
}

/// |a − n| / max(1e-8, |a| + |n|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Entries whose analytic gradient is at least this large are sampled first;
/// smaller ones sit below central-difference round-off.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Sample up to `n` (tensor, index) pairs, preferring entries whose analytic
/// gradient is large enough to be resolved by finite differences.
pub fn sample_coordinates(
    grads: &[Option<Vec<f64>>],
    sizes: &[usize],
    n: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut strong = Vec::new();
    let mut weak = Vec::new();
    for (i, &size) in sizes.iter().enumerate() {
        for j in 0..size {
            let g = grads.get(i).and_then(|g| g.as_ref()).map_or(0.0, |g| g[j]);
            if g.abs() >= GRAD_CHECK_FLOOR {
                strong.push((i, j));
            } else {
                weak.push((i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    strong.shuffle(&mut rng);
    weak.shuffle(&mut rng);
    strong.into_iter().chain(weak).take(n).collect()
}

/// Largest relative error between analytic gradients and central finite
/// differences over up to `samples` parameters.
pub fn grad_check<L: TokenLoss<f64> + ?Sized>(
    model: &Seq2SeqModel<f64>,
    batch: &[EncodedPair],
    loss: &L,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, NnetError> {
    let (_, grads) = model.loss_and_grads(batch, loss)?;
    let sizes: Vec<usize> = model.params.tensors().iter().map(Tensor::len).collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, j) in sample_coordinates(&grads, &sizes, samples, seed) {
        let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
        let orig = probe.params.tensors()[i].data[j];
        probe.params.tensors_mut()[i].data[j] = orig + eps;
        let up = probe.loss(batch, loss)?;
        probe.params.tensors_mut()[i].data[j] = orig - eps;
        let down = probe.loss(batch, loss)?;
        probe.params.tensors_mut()[i].data[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}
