//! Finite-difference check of the full pre-training loss in 64-bit.

use numcore::gradcheck::rel_err;
use numcore::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{DataConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::model::Model;
use crate::nn::{Ctx, GradPolicy};
use crate::objectives::total_loss;
use crate::render::ImageRaster;
use crate::train::{prepare_batch, PreparedBatch};

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Error of the directional derivative along a random direction.
    pub directional_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradReport {
    pub samples: usize,
    pub h: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

impl ModelGradReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.max(a.directional_rel_err).total_cmp(&b.max_rel_err.max(b.directional_rel_err)))
    }
}

fn loss_of<'m>(model: &'m Model<f64>, batch: &PreparedBatch, run: &RunConfig, policy: GradPolicy) -> Result<(f64, Ctx<'m, f64>, numcore::Var)> {
    let refs: Vec<&ImageRaster> = batch.images.iter().collect();
    let mut ctx = model.ctx(policy);
    let out = total_loss(&mut ctx, &model.cfg, &batch.as_batch(&refs), &run.train.losses, false)?;
    Ok((ctx.g.item(out.total), ctx, out.total))
}

/// Checks every trainable tensor: `coords` sampled coordinates (always
/// including the largest-magnitude one) plus one random direction.
pub fn check_model(run: &RunConfig, samples: usize, coords: usize, h: f64, seed: u64) -> Result<ModelGradReport> {
    if samples == 0 {
        return Err(Error::Usage("gradient check needs at least one sample".into()));
    }
    let per_class = samples.div_ceil(run.model.classes.max(1));
    let data = Dataset::generate(&DataConfig { seed, train_per_class: per_class, test_per_class: 0, ..run.data.clone() })?;
    let clouds: Vec<&PointCloud> = data.split(Split::Train).into_iter().take(samples).map(|s| &s.cloud).collect();
    let ids: Vec<u64> = (0..clouds.len() as u64).collect();
    let batch = prepare_batch(&clouds, &ids, &Rng::new(seed), run)?;

    let mut model: Model<f64> = Model::initialized(run.model.clone(), seed)?;
    let (loss, grads) = {
        let (loss, mut ctx, total) = loss_of(&model, &batch, run, GradPolicy::Trainable)?;
        ctx.g.backward(total)?;
        (loss, ctx.param_grads())
    };
    let mut rng = Rng::new(seed).split(1);
    let mut tensors = Vec::new();
    for name in model.params.trainable_names() {
        let n = model.params.get(&name)?.tensor.numel();
        let g = grads.get(&name).cloned().unwrap_or_else(|| vec![0.0; n]);
        let mut pick: Vec<usize> = rng.choose_distinct(n, coords.min(n));
        let top = (0..n).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
        if !pick.contains(&top) {
            pick.push(top);
        }
        let mut max_err: f64 = 0.0;
        for &i in &pick {
            let x0 = model.params.get(&name)?.tensor.data()[i];
            model.params.get_mut(&name)?.tensor.data_mut()[i] = x0 + h;
            let up = loss_of(&model, &batch, run, GradPolicy::None)?.0;
            model.params.get_mut(&name)?.tensor.data_mut()[i] = x0 - h;
            let down = loss_of(&model, &batch, run, GradPolicy::None)?.0;
            model.params.get_mut(&name)?.tensor.data_mut()[i] = x0;
            max_err = max_err.max(rel_err(g[i], (up - down) / (2.0 * h)));
        }
        let dir: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let base = model.params.get(&name)?.tensor.data().to_vec();
        let shifted = |s: f64| base.iter().zip(&dir).map(|(b, d)| b + s * d / norm).collect::<Vec<f64>>();
        model.params.get_mut(&name)?.tensor.data_mut().copy_from_slice(&shifted(h));
        let up = loss_of(&model, &batch, run, GradPolicy::None)?.0;
        model.params.get_mut(&name)?.tensor.data_mut().copy_from_slice(&shifted(-h));
        let down = loss_of(&model, &batch, run, GradPolicy::None)?.0;
        model.params.get_mut(&name)?.tensor.data_mut().copy_from_slice(&base);
        let analytic = g.iter().zip(&dir).map(|(a, d)| a * d / norm).sum::<f64>();
        let directional = rel_err(analytic, (up - down) / (2.0 * h));
        tensors.push(TensorCheck { name, coords: pick.len(), max_rel_err: max_err, directional_rel_err: directional });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err.max(t.directional_rel_err)).fold(0.0, f64::max);
    Ok(ModelGradReport { samples: clouds.len(), h, loss, tensors, max_rel_err })
}
