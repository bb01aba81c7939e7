//! Training driver: per-orientation Adam optimization on mask-interior
//! patch batches with best-validation checkpointing.
//!
//! Parallelism happens over samples inside a batch: picks are split into
//! fixed-size chunks, workers produce per-chunk gradient sums, and chunks are
//! reduced in index order. The chunking is independent of the worker count,
//! so training output is bitwise identical for any `--threads` setting.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use svox_core::model::{build_network, count_params, ModelConfig, ModelError, NetGrads, Network};
use svox_core::optim::{AdamParams, OptimError, OptimizerState};
use svox_core::sampler::{
    self, NormalizationSpec, PatchIndex, SamplerError,
};
use svox_core::tensor::TensorError;
use svox_core::volume::{
    reorient, reorient_mask, Mask, Orientation, OrientationTag, Volume, VolumeError,
};

use crate::formats::{self, FormatError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("atlas volumes disagree on dims: {a:?} vs {b:?}")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("validation loss became non-finite at epoch {epoch} with no usable checkpoint")]
    DivergedWithoutCheckpoint { epoch: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// One training run's settings. `seed` drives the split and the per-epoch
/// shuffles; the network init seed comes from the model config.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub orientation: Orientation,
    pub adam: AdamParams,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 25,
            batch_size: 64,
            seed: 0,
            orientation: Orientation::axial(),
            adam: AdamParams::default(),
        }
    }
}

/// Co-registered training subject.
#[derive(Clone, Copy)]
pub struct Atlas<'a> {
    pub echo1: &'a Volume,
    pub echo2: &'a Volume,
    pub ct: &'a Volume,
    pub mask: &'a Mask,
}

impl<'a> Atlas<'a> {
    fn validate(&self) -> Result<(), TrainError> {
        for v in [self.echo2, self.ct] {
            if v.dims != self.echo1.dims {
                return Err(TrainError::DimsMismatch { a: self.echo1.dims, b: v.dims });
            }
        }
        self.mask.check_dims(self.echo1)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub orientation: OrientationTag,
    pub seed: u64,
    pub init_seed: u64,
    pub param_count: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub diverged: bool,
    pub total_wall_ms: f64,
}

/// Fixed gradient-chunk size; part of the determinism contract (must not
/// depend on the worker count).
const GRAD_CHUNK: usize = 8;

struct ChunkResult {
    grads: NetGrads,
    loss_sum: f64,
}

fn batch_step(
    net: &Network,
    echo1: &Volume,
    echo2: &Volume,
    ct: &Volume,
    idx: &PatchIndex,
    picks: &[usize],
    norm: &NormalizationSpec,
) -> Result<(NetGrads, f64), TrainError> {
    let chunks: Vec<&[usize]> = picks.chunks(GRAD_CHUNK).collect();
    let results: Vec<Result<ChunkResult, TrainError>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut grads = NetGrads::zeros_like(net);
            let mut loss_sum = 0.0f64;
            for &pick in chunk.iter() {
                let (e1, e2, target) = sampler::extract_batch(echo1, echo2, ct, idx, &[pick], norm)?;
                let (loss, g, _) = net.loss_and_grads::<f32, f32>(&e1, &e2, &target, false)?;
                grads.accumulate(&g);
                loss_sum += loss;
            }
            Ok(ChunkResult { grads, loss_sum })
        })
        .collect();
    let mut total = NetGrads::zeros_like(net);
    let mut loss_sum = 0.0f64;
    for r in results {
        let r = r?;
        total.accumulate(&r.grads);
        loss_sum += r.loss_sum;
    }
    total.scale(1.0 / picks.len() as f64);
    Ok((total, loss_sum))
}

fn mean_val_loss(
    net: &Network,
    echo1: &Volume,
    echo2: &Volume,
    ct: &Volume,
    idx: &PatchIndex,
    picks: &[usize],
    norm: &NormalizationSpec,
) -> Result<f64, TrainError> {
    let losses: Vec<Result<f64, TrainError>> = picks
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut s = 0.0f64;
            for &pick in chunk {
                let (e1, e2, target) = sampler::extract_batch(echo1, echo2, ct, idx, &[pick], norm)?;
                let out = net.forward_full(&e1, &e2)?;
                s += svox_core::tensor::mse_loss(&out, &target)?;
            }
            Ok(s)
        })
        .collect();
    let mut sum = 0.0f64;
    for l in losses {
        sum += l?;
    }
    Ok(sum / picks.len() as f64)
}

/// Train one orientation model. Reorients the atlas, enumerates mask-interior
/// centers, splits 75/25, and loops epochs of seeded-shuffled batches
/// minimizing patch MSE. Returns the best-validation checkpoint; fully
/// deterministic given the seeds.
pub fn train(
    atlas: Atlas<'_>,
    cfg: &ModelConfig,
    plan: &TrainPlan,
) -> Result<(Network, NormalizationSpec, TrainHistory), TrainError> {
    atlas.validate()?;
    let t_start = Instant::now();
    // normalization is computed on the canonical orientation so all three
    // orientation models share identical stats
    let norm = sampler::compute_normalization(atlas.echo1, atlas.echo2, atlas.mask)?;
    let o = plan.orientation;
    let echo1 = reorient(atlas.echo1, o);
    let echo2 = reorient(atlas.echo2, o);
    let ct = reorient(atlas.ct, o);
    let mask = reorient_mask(atlas.mask, o);

    let idx = sampler::enumerate_centers(&mask, o, cfg.patch_shape)?;
    let (mut train_picks, val_picks) = sampler::split_train_val(&idx, plan.seed)?;

    let mut net = build_network(cfg)?;
    let mut opt = OptimizerState::new(&net, plan.adam);

    let mut history = TrainHistory {
        orientation: o.tag,
        seed: plan.seed,
        init_seed: cfg.seed,
        param_count: count_params(&net),
        n_train: train_picks.len(),
        n_val: val_picks.len(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        diverged: false,
        total_wall_ms: 0.0,
    };
    let mut best: Option<(f64, Network, usize)> = None;

    for epoch in 1..=plan.epochs {
        let t_epoch = Instant::now();
        sampler::shuffle_picks(&mut train_picks, plan.seed, epoch as u64);
        let mut train_loss_sum = 0.0f64;
        for batch in train_picks.chunks(plan.batch_size) {
            let (grads, loss_sum) = batch_step(&net, &echo1, &echo2, &ct, &idx, batch, &norm)?;
            train_loss_sum += loss_sum;
            opt.step(&mut net, &grads)?;
        }
        let train_loss = train_loss_sum / train_picks.len() as f64;
        let val_loss = mean_val_loss(&net, &echo1, &echo2, &ct, &idx, &val_picks, &norm)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            wall_ms: t_epoch.elapsed().as_secs_f64() * 1e3,
        });
        if !val_loss.is_finite() {
            history.diverged = true;
            break;
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, net.clone(), epoch));
        }
    }

    let (best_val, best_net, best_epoch) = best.ok_or(TrainError::DivergedWithoutCheckpoint {
        epoch: history.epochs.len(),
    })?;
    history.best_epoch = best_epoch;
    history.best_val_loss = best_val;
    history.total_wall_ms = t_start.elapsed().as_secs_f64() * 1e3;
    Ok((best_net, norm, history))
}

/// Train all three orientations with seeds `base`, `base+1`, `base+2` and
/// write one tagged model file plus a history sidecar per orientation.
pub fn train_all_orientations(
    atlas: Atlas<'_>,
    cfg: &ModelConfig,
    plan: &TrainPlan,
    out_dir: &Path,
) -> Result<Vec<TrainHistory>, TrainError> {
    let mut histories = Vec::with_capacity(3);
    for (i, orientation) in
        [Orientation::axial(), Orientation::coronal(), Orientation::sagittal()].into_iter().enumerate()
    {
        let seed = plan.seed.wrapping_add(i as u64);
        let mut cfg_i = cfg.clone();
        cfg_i.seed = seed;
        let plan_i = TrainPlan { seed, orientation, ..plan.clone() };
        let (net, norm, history) = train(atlas, &cfg_i, &plan_i)?;
        formats::model::save_model(
            &net,
            orientation.tag,
            &norm,
            &out_dir.join(formats::model::model_file_name(orientation.tag)),
        )?;
        let hist_path = out_dir.join(format!("history_{}.json", orientation.tag.as_str()));
        std::fs::write(&hist_path, serde_json::to_vec_pretty(&history).expect("history serializes"))
            .map_err(|e| formats::FormatError::Io { path: hist_path, source: e })?;
        histories.push(history);
    }
    Ok(histories)
}
