//! The training loop: positive/negative sample construction, per-step
//! optimization of L = L_r + lambda_c * L_c, run reports, and resumable
//! checkpoints.
//!
//! Determinism contract: given (seed, config, dataset) every run produces
//! identical loss curves and parameters, across reruns and across
//! checkpoint resume. All randomness flows through one counted ChaCha
//! stream consumed on the planning thread; batch jobs may execute in
//! parallel but gradients are reduced in batch order.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, Dataset, OccurrenceSequence};
use crate::error::{Error, Result};
use crate::io::{self, Container};
use crate::losses::{
    contrastive_loss_tape, infonce_dot_tape, net_loss_tape, recon_loss_tape, ContrastMode,
    LossConfig,
};
use crate::model::{
    adapter_encode_tape, bind_model, model_forward_tape, semantics_extraction_tape,
    standard_normal, AdapterParams, ModelParams, ModelShape, CHECKPOINT_MAGIC,
};
use crate::opt::{apply_update, OptState, Optimizer};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Knobs of the optimization loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub augment: bool,
    pub contrast: ContrastMode,
    /// Draw each sequence's permutation positive and negative set once
    /// before the loop (as in the original procedure) instead of fresh per
    /// step.
    pub fixed_contrast_samples: bool,
    /// Stop early after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub enc_layers: usize,
    pub bottleneck_width: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::adam_default(),
            augment: true,
            contrast: ContrastMode::Frobenius,
            fixed_contrast_samples: false,
            patience: None,
            enc_layers: 2,
            bottleneck_width: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.enc_layers < 1 {
            return Err(Error::Config("enc_layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// One history row per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub contrast: f64,
    /// Mean Frobenius norm of S' across the batch.
    pub s_norm: f64,
}

/// Mutable state of a run. Fully serializable, including the RNG position,
/// so a resumed run is bitwise identical to an uninterrupted one.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt_state: OptState,
    pub epoch: usize,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
    pub val_history: Vec<(usize, f64)>,
    pub best_val: f64,
    pub best_params: Option<ModelParams>,
}

impl TrainState {
    /// Fresh state: parameters drawn from the seed, optimizer zeroed. The
    /// same stream then drives shuffling, augmentation, and contrastive
    /// sampling.
    pub fn new(shape: ModelShape, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::init(shape, cfg.enc_layers, cfg.bottleneck_width, &mut rng);
        let n = params.num_trainable();
        TrainState {
            params,
            opt_state: OptState::new(n),
            epoch: 0,
            seed: cfg.seed,
            rng,
            history: Vec::new(),
            val_history: Vec::new(),
            best_val: f64::INFINITY,
            best_params: None,
        }
    }

    pub fn with_adapter(mut self, adapter: AdapterParams) -> Self {
        self.params.adapter = adapter;
        self
    }

    pub fn to_container(&self, config_echo: &str) -> Container {
        let mut c = self.params.to_container(config_echo);
        c.meta.push(("train.epoch".into(), self.epoch.to_string()));
        c.meta.push(("train.seed".into(), self.seed.to_string()));
        c.meta.push(("train.rng_word_pos".into(), self.rng.get_word_pos().to_string()));
        c.meta.push(("train.opt_t".into(), self.opt_state.t.to_string()));
        c.meta.push(("train.best_val".into(), format!("{:?}", self.best_val)));
        c.tensors.push((
            "opt.m".into(),
            Tensor::from_vec(&[self.opt_state.m.len()], self.opt_state.m.clone()).unwrap(),
        ));
        c.tensors.push((
            "opt.v".into(),
            Tensor::from_vec(&[self.opt_state.v.len()], self.opt_state.v.clone()).unwrap(),
        ));
        let mut hist = Vec::with_capacity(self.history.len() * 5);
        for r in &self.history {
            hist.extend_from_slice(&[r.step as f64, r.loss, r.recon, r.contrast, r.s_norm]);
        }
        c.tensors
            .push(("history.steps".into(), Tensor::from_vec(&[self.history.len(), 5], hist).unwrap()));
        let mut vh = Vec::with_capacity(self.val_history.len() * 2);
        for (e, v) in &self.val_history {
            vh.extend_from_slice(&[*e as f64, *v]);
        }
        c.tensors.push((
            "history.val".into(),
            Tensor::from_vec(&[self.val_history.len(), 2], vh).unwrap(),
        ));
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let meta = |key: &str| -> Result<String> {
            c.meta_value(key)
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("checkpoint missing meta `{key}`")))
        };
        let epoch: usize =
            meta("train.epoch")?.parse().map_err(|_| Error::Parse("bad train.epoch".into()))?;
        let seed: u64 =
            meta("train.seed")?.parse().map_err(|_| Error::Parse("bad train.seed".into()))?;
        let word_pos: u128 = meta("train.rng_word_pos")?
            .parse()
            .map_err(|_| Error::Parse("bad train.rng_word_pos".into()))?;
        let opt_t: u64 =
            meta("train.opt_t")?.parse().map_err(|_| Error::Parse("bad train.opt_t".into()))?;
        let best_val: f64 = meta("train.best_val")?
            .parse()
            .map_err(|_| Error::Parse("bad train.best_val".into()))?;
        let m = c.take_tensor("opt.m")?.into_data();
        let v = c.take_tensor("opt.v")?.into_data();
        let hist_t = c.take_tensor("history.steps")?;
        let mut history = Vec::with_capacity(hist_t.shape()[0]);
        for row in hist_t.data().chunks(5) {
            history.push(StepRecord {
                step: row[0] as usize,
                loss: row[1],
                recon: row[2],
                contrast: row[3],
                s_norm: row[4],
            });
        }
        let val_t = c.take_tensor("history.val")?;
        let val_history: Vec<(usize, f64)> =
            val_t.data().chunks(2).map(|r| (r[0] as usize, r[1])).collect();
        let params = ModelParams::from_container(&mut c)?;
        if m.len() != params.num_trainable() || v.len() != m.len() {
            return Err(Error::Parse("optimizer state length mismatch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos);
        Ok(TrainState {
            params,
            opt_state: OptState { m, v, t: opt_t },
            epoch,
            seed,
            rng,
            history,
            val_history,
            best_val,
            best_params: None,
        })
    }

    pub fn save(&self, path: &Path, config_echo: &str) -> Result<()> {
        io::write_container_atomic(path, CHECKPOINT_MAGIC, &self.to_container(config_echo))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let c = io::read_container_file(path, CHECKPOINT_MAGIC)?;
        let echo = c.config_echo.clone();
        Ok((Self::from_container(c)?, echo))
    }
}

// ── Sample construction ──────────────────────────────────────────────────

/// Uniformly random non-identity permutation of 0..m (identity only when
/// m == 1).
pub fn make_positive_perm(m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..m).collect();
    if m < 2 {
        return perm;
    }
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Reorder frames: output frame t is input frame perm[t].
pub fn apply_frame_permutation(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let block: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(x.len());
    for &p in perm {
        data.extend_from_slice(&x.data()[p * block..(p + 1) * block]);
    }
    Tensor::from_vec(s, data).unwrap()
}

/// X with its frames permuted by a uniformly random non-identity
/// permutation (frame multiset preserved exactly).
pub fn make_positive(x: &Tensor, rng: &mut impl Rng) -> Tensor {
    let perm = make_positive_perm(x.shape()[0], rng);
    apply_frame_permutation(x, &perm)
}

/// `k` distinct indices != `current`, uniform without replacement.
pub fn sample_negatives(
    dataset_len: usize,
    current: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if dataset_len < k + 1 {
        return Err(Error::Config(format!(
            "need at least {} sequences to draw {k} negatives, have {dataset_len}",
            k + 1
        )));
    }
    let picked = rand::seq::index::sample(rng, dataset_len - 1, k);
    Ok(picked.into_iter().map(|j| if j >= current { j + 1 } else { j }).collect())
}

// ── Batch planning and execution ─────────────────────────────────────────

/// Everything one sequence's forward/backward pass needs, fully determined
/// on the planning thread.
#[derive(Debug, Clone)]
pub struct SeqJob {
    pub x: Tensor,
    pub y: Tensor,
    /// Frame-permuted positive of `x` (empty when lambda_c == 0).
    pub x_pos: Option<Tensor>,
    pub negatives: Vec<Tensor>,
    pub noise: Option<JobNoise>,
}

/// Reparameterization noise for every encode in the job (VAE adapter only).
#[derive(Debug, Clone)]
pub struct JobNoise {
    pub anchor: Vec<Tensor>,
    pub positive: Vec<Tensor>,
    pub negatives: Vec<Vec<Tensor>>,
}

/// Per-sequence fixed contrastive draw (the `fixed_contrast_samples` mode).
#[derive(Debug, Clone)]
pub struct FixedContrast {
    pub perm: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Pre-draw one permutation and negative set per training sequence from a
/// salted stream derived from the run seed, so resumed runs rebuild the
/// identical plan.
pub fn fixed_contrast_plans(
    seed: u64,
    train: &[OccurrenceSequence],
    k: usize,
) -> Result<Vec<FixedContrast>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_0f17_u64);
    let mut out = Vec::with_capacity(train.len());
    for (i, seq) in train.iter().enumerate() {
        out.push(FixedContrast {
            perm: make_positive_perm(seq.x.shape()[0], &mut rng),
            negatives: sample_negatives(train.len(), i, k, &mut rng)?,
        });
    }
    Ok(out)
}

fn frame_noise(shape: &[usize], rng: &mut impl Rng) -> Vec<Tensor> {
    // One standard-normal tensor per frame, at the VAE latent resolution.
    let (m, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    (0..m)
        .map(|_| {
            let data: Vec<f64> =
                (0..c * (h / 2) * (w / 2)).map(|_| standard_normal(rng)).collect();
            Tensor::from_vec(&[c, h / 2, w / 2], data).unwrap()
        })
        .collect()
}

/// Draw everything random for one batch, in batch order, on one thread.
pub fn plan_batch(
    batch: &[usize],
    train: &[OccurrenceSequence],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    fixed: Option<&[FixedContrast]>,
    vae_adapter: bool,
    rng: &mut impl Rng,
) -> Result<Vec<SeqJob>> {
    let mut jobs = Vec::with_capacity(batch.len());
    for &idx in batch {
        let seq = &train[idx];
        let aug = if cfg.augment { augment(seq, rng)? } else { seq.clone() };
        let contrastive_on = loss_cfg.lambda_c > 0.0;
        let (x_pos, negatives) = if contrastive_on {
            let (perm, neg_idx) = match fixed {
                Some(plans) => (plans[idx].perm.clone(), plans[idx].negatives.clone()),
                None => (
                    make_positive_perm(seq.x.shape()[0], rng),
                    sample_negatives(train.len(), idx, loss_cfg.num_negatives, rng)?,
                ),
            };
            let x_pos = apply_frame_permutation(&aug.x, &perm);
            let negatives: Vec<Tensor> = neg_idx.iter().map(|&j| train[j].x.clone()).collect();
            (Some(x_pos), negatives)
        } else {
            (None, Vec::new())
        };
        let noise = if vae_adapter {
            let anchor = frame_noise(aug.x.shape(), rng);
            let positive = if contrastive_on {
                frame_noise(aug.x.shape(), rng)
            } else {
                Vec::new()
            };
            let neg_noise: Vec<Vec<Tensor>> =
                negatives.iter().map(|nx| frame_noise(nx.shape(), rng)).collect();
            Some(JobNoise { anchor, positive, negatives: neg_noise })
        } else {
            None
        };
        jobs.push(SeqJob { x: aug.x, y: aug.y, x_pos, negatives, noise });
    }
    Ok(jobs)
}

/// Stats for one executed sequence.
#[derive(Debug, Clone)]
pub struct SeqOutcome {
    pub grads: Vec<f64>,
    pub loss: f64,
    pub recon: f64,
    pub contrast: f64,
    pub s_norm: f64,
}

/// Forward + backward for one sequence. Pure in (params, job).
pub fn execute_seq(
    params: &ModelParams,
    job: &SeqJob,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    want_grads: bool,
) -> Result<SeqOutcome> {
    let mut tape = Tape::new();
    let mv = bind_model(&mut tape, params);
    let anchor_noise = job.noise.as_ref().map(|n| n.anchor.as_slice());
    let fwd = model_forward_tape(&mut tape, &job.x, &mv, anchor_noise)?;
    let yv = tape.constant(job.y.clone());
    let recon = recon_loss_tape(&mut tape, yv, fwd.y_pred, loss_cfg.lambda)?;

    let (loss, lc_val) = if let Some(x_pos) = &job.x_pos {
        let pv = tape.constant(x_pos.clone());
        let pos_noise = job.noise.as_ref().map(|n| n.positive.as_slice());
        let pos_in = adapter_encode_tape(&mut tape, pv, &mv.adapter, pos_noise)?;
        let s_pos = semantics_extraction_tape(&mut tape, pos_in, &mv)?;
        let mut s_negs = Vec::with_capacity(job.negatives.len());
        for (j, nx) in job.negatives.iter().enumerate() {
            let nv = tape.constant(nx.clone());
            let neg_noise = job.noise.as_ref().map(|n| n.negatives[j].as_slice());
            let neg_in = adapter_encode_tape(&mut tape, nv, &mv.adapter, neg_noise)?;
            s_negs.push(semantics_extraction_tape(&mut tape, neg_in, &mv)?);
        }
        let lc = match cfg.contrast {
            ContrastMode::Frobenius => contrastive_loss_tape(
                &mut tape,
                fwd.latent.semantics,
                s_pos,
                &s_negs,
                loss_cfg.omega,
            )?,
            ContrastMode::Dot => {
                infonce_dot_tape(&mut tape, fwd.latent.semantics, s_pos, &s_negs)?
            }
        };
        let total = net_loss_tape(&mut tape, recon, lc, loss_cfg.lambda_c)?;
        let lc_val = tape.value(lc).data()[0];
        (total, lc_val)
    } else {
        (recon, 0.0)
    };

    let loss_val = tape.value(loss).data()[0];
    let recon_val = tape.value(recon).data()[0];
    let s_norm = tape.value(fwd.latent.semantics).frobenius_norm();
    let grads = if want_grads {
        tape.backward(loss)?;
        mv.flat_grads(&tape)
    } else {
        Vec::new()
    };
    Ok(SeqOutcome { grads, loss: loss_val, recon: recon_val, contrast: lc_val, s_norm })
}

/// Batch-mean loss and gradient. Jobs may run in parallel; the reduction
/// is in batch order, so results are bitwise reproducible.
pub fn execute_batch(
    params: &ModelParams,
    jobs: &[SeqJob],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    want_grads: bool,
) -> Result<(Vec<f64>, StepRecord)> {
    let outcomes: Vec<Result<SeqOutcome>> = if jobs.len() > 1 {
        use rayon::prelude::*;
        jobs.par_iter().map(|j| execute_seq(params, j, cfg, loss_cfg, want_grads)).collect()
    } else {
        jobs.iter().map(|j| execute_seq(params, j, cfg, loss_cfg, want_grads)).collect()
    };
    let mut grads = vec![0.0; if want_grads { params.num_trainable() } else { 0 }];
    let mut rec = StepRecord { step: 0, loss: 0.0, recon: 0.0, contrast: 0.0, s_norm: 0.0 };
    let count = jobs.len() as f64;
    for out in outcomes {
        let out = out?;
        if want_grads {
            for (g, o) in grads.iter_mut().zip(&out.grads) {
                *g += o / count;
            }
        }
        rec.loss += out.loss / count;
        rec.recon += out.recon / count;
        rec.contrast += out.contrast / count;
        rec.s_norm += out.s_norm / count;
    }
    Ok((grads, rec))
}

/// One optimizer step over a batch of training-sequence indices.
pub fn train_step(
    state: &mut TrainState,
    batch: &[usize],
    train: &[OccurrenceSequence],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    fixed: Option<&[FixedContrast]>,
) -> Result<()> {
    let vae = matches!(state.params.adapter, AdapterParams::Vae(_));
    let jobs = plan_batch(batch, train, cfg, loss_cfg, fixed, vae, &mut state.rng)?;
    let (grads, mut rec) = execute_batch(&state.params, &jobs, cfg, loss_cfg, true)?;
    if !rec.loss.is_finite() {
        return Err(Error::NonFinite { step: state.history.len(), last_good: None });
    }
    let mut flat = state.params.flatten();
    apply_update(cfg.optimizer, &mut state.opt_state, &mut flat, &grads, cfg.learning_rate);
    state.params.assign_flat(&flat);
    rec.step = state.history.len();
    state.history.push(rec);
    Ok(())
}

/// Mean reconstruction loss of deterministic predictions over a split.
pub fn validation_recon(
    params: &ModelParams,
    split: &[OccurrenceSequence],
    lambda: f64,
) -> Result<f64> {
    if split.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for seq in split {
        let pred = crate::model::predict(&seq.x, params)?;
        total += crate::losses::recon_loss(&seq.y, &pred, lambda)?;
    }
    Ok(total / split.len() as f64)
}

/// Worker-pool size: `MAPSED_THREADS` when set, machine cores otherwise.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("MAPSED_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("MAPSED_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Artifacts written by a run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub report: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            last_checkpoint: dir.join("last.ckpt"),
            best_checkpoint: dir.join("best.ckpt"),
            report: dir.join("report.txt"),
        }
    }
}

/// Epoch-driven loop: shuffle, batch, step; validation reconstruction per
/// epoch with best-checkpoint tracking; optional early stop on patience.
/// When `out` is given, `last.ckpt` (resumable), `best.ckpt` (model only)
/// and `report.txt` are maintained.
pub fn train_loop(
    data: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut state: TrainState,
    config_echo: &str,
    out: Option<&RunPaths>,
) -> Result<TrainState> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if loss_cfg.lambda_c > 0.0 && data.train.len() < loss_cfg.num_negatives + 1 {
        return Err(Error::Config(format!(
            "contrastive training needs at least {} training sequences, have {}",
            loss_cfg.num_negatives + 1,
            data.train.len()
        )));
    }
    let fixed = if cfg.fixed_contrast_samples && loss_cfg.lambda_c > 0.0 {
        Some(fixed_contrast_plans(cfg.seed, &data.train, loss_cfg.num_negatives)?)
    } else {
        None
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads()?)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;

    let mut stale_epochs = 0usize;
    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut state.rng);
        for batch in order.chunks(cfg.batch_size) {
            let result = pool.install(|| {
                train_step(&mut state, batch, &data.train, cfg, loss_cfg, fixed.as_deref())
            });
            if let Err(Error::NonFinite { step, .. }) = &result {
                let last_good = out.map(|p| p.last_checkpoint.display().to_string());
                return Err(Error::NonFinite { step: *step, last_good });
            }
            result?;
        }
        state.epoch += 1;

        // Validation selection; falls back to the training split when no
        // validation sequences exist.
        let val_split: &[OccurrenceSequence] =
            if data.val.is_empty() { &data.train } else { &data.val };
        let val = pool.install(|| validation_recon(&state.params, val_split, loss_cfg.lambda))?;
        state.val_history.push((state.epoch, val));
        if val < state.best_val {
            state.best_val = val;
            state.best_params = Some(state.params.clone());
            stale_epochs = 0;
            if let Some(paths) = out {
                state.params.save(&paths.best_checkpoint, config_echo)?;
            }
        } else {
            stale_epochs += 1;
        }
        if let Some(paths) = out {
            state.save(&paths.last_checkpoint, config_echo)?;
        }
        if let Some(p) = cfg.patience {
            if stale_epochs >= p {
                break;
            }
        }
    }
    if let Some(paths) = out {
        write_report(&state, config_echo, &paths.report)?;
    }
    Ok(state)
}

/// Line-oriented run report: a header echoing the configuration, then one
/// row per optimizer step.
pub fn write_report(state: &TrainState, config_echo: &str, path: &Path) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(f, "# run report")?;
        for line in config_echo.lines() {
            writeln!(f, "# {line}")?;
        }
        writeln!(f, "# seed = {}", state.seed)?;
        writeln!(f, "# columns: step loss recon contrast s_norm")?;
        for r in &state.history {
            writeln!(f, "{} {} {} {} {}", r.step, r.loss, r.recon, r.contrast, r.s_norm)?;
        }
        writeln!(f, "# validation: epoch recon")?;
        for (e, v) in &state.val_history {
            writeln!(f, "# val {e} {v}")?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
