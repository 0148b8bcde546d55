//! One optimisation step and the eval-mode holdout loss.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::data::{mask_variable, SampleWindow};
use crate::losses::{
    batch_from_columns, contrastive_grad, contrastive_loss, deviation_grad, deviation_loss, reconstruction_loss,
    row_reconstruction_grad, total_loss, vanilla_supervised_contrastive_grad, vanilla_supervised_contrastive_loss,
    LossBreakdown,
};
use crate::model::{DeviationCache, ModelBundle};
use crate::nn::{cast, Real};
use crate::{Error, Heads, Result};

/// Everything produced by a forward/backward pass that the caller needs
/// after the parameter update.
pub(crate) struct StepOutput<T> {
    pub loss: LossBreakdown,
    pub deviation_cache: Option<DeviationCache<T>>,
}

fn to_f64<T: Real>(a: ArrayView2<T>) -> Array2<f64> {
    a.mapv(|v| v.to_f64().unwrap_or(f64::NAN))
}

fn from_f64<T: Real>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(cast)
}

/// Variables to reconstruct for one normal window: all K, or a uniform
/// subset of `per_sample` of them.
fn pick_variables(k: usize, per_sample: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match per_sample {
        Some(r) if r < k => {
            let mut v = index::sample(rng, k, r).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..k).collect(),
    }
}

/// Forward and backward through every active head for one batch,
/// accumulating parameter gradients into `grads`.
pub(crate) fn forward_backward<T: Real>(
    model: &ModelBundle<T>,
    grads: &mut ModelBundle<T>,
    batch: &[SampleWindow],
    heads: Heads,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput<T>> {
    let (k, l) = (model.config.k, model.config.l);
    let n = batch.len();
    let labels: Vec<f64> = batch.iter().map(|w| w.label).collect();

    // masked copies of the normal windows for the generative head
    let mut masked: Vec<Array2<f32>> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    if heads.rec {
        for (owner, (i, w)) in batch.iter().enumerate().filter(|(_, w)| w.is_normal()).enumerate() {
            for var in pick_variables(k, cfg.rec_vars_per_sample, rng) {
                masked.push(mask_variable(w.values.view(), var)?);
                owners.push(owner);
                rows.push((i, var));
            }
        }
    }
    let m = masked.len();
    let views: Vec<ArrayView2<f32>> =
        batch.iter().map(|w| w.values.view()).chain(masked.iter().map(|x| x.view())).collect();
    let input: Array2<T> = model.stack(&views)?;

    let need_z = heads.dev || heads.con;
    let (z_all, enc_cache) = model.encoder.forward(&input, l);
    model.count_passes(n + m);
    let mut dz_all = Array2::<T>::zeros(z_all.dim());

    let mut rec = 0.0;
    if m > 0 {
        let zm = z_all.slice(s![.., n..]).to_owned();
        let (y, dec_cache) = model.decoder.forward(&zm);
        let mut pred = Array2::<f64>::zeros((m, l));
        let mut target = Array2::<f64>::zeros((m, l));
        for (j, &(i, var)) in rows.iter().enumerate() {
            pred.row_mut(j).assign(&to_f64(y.slice(s![var..var + 1, j * l..(j + 1) * l])).row(0));
            target.row_mut(j).assign(&batch[i].values.row(var).mapv(f64::from));
        }
        let (loss, gpred) = row_reconstruction_grad(pred.view(), target.view(), &owners)?;
        rec = loss;
        let mut dy = Array2::<T>::zeros(y.dim());
        for (j, &(_, var)) in rows.iter().enumerate() {
            dy.slice_mut(s![var, j * l..(j + 1) * l]).assign(&gpred.row(j).mapv(cast::<T>));
        }
        let dzm = model.decoder.backward(&dec_cache, &dy, &mut grads.decoder);
        dz_all.slice_mut(s![.., n..]).assign(&dzm);
    }

    let z = z_all.slice(s![.., ..n]).to_owned();
    let mut dz = Array2::<T>::zeros(z.dim());
    let mut dev = 0.0;
    let mut deviation_cache = None;
    if heads.dev {
        let (raw, cache) = model.deviation.forward_train(&z, rng);
        let (mu, sigma) = (model.config.prior_mu, model.config.prior_sigma);
        let scores: Vec<f64> = raw.row(0).iter().map(|v| (v.to_f64().unwrap_or(f64::NAN) - mu) / sigma).collect();
        let (loss, g) = deviation_grad(&scores, &labels, cfg.margin)?;
        dev = loss;
        let draw = Array2::from_shape_fn((1, n), |(_, i)| cast::<T>(g[i] / sigma));
        dz += &model.deviation.backward(&cache, &draw, &mut grads.deviation);
        deviation_cache = Some(cache);
    }

    let mut con = 0.0;
    let normals = labels.iter().filter(|&&y| y == 0.0).count();
    if heads.con && normals >= 2 {
        let (g, cache) = model.projection.forward(&z);
        let cb = batch_from_columns(to_f64(g.view()).view(), &labels, cfg.temperature)?;
        let (loss, gg) = if cfg.vsc { vanilla_supervised_contrastive_grad(&cb)? } else { contrastive_grad(&cb)? };
        con = loss;
        let dg: Array2<T> = from_f64(&gg.t().to_owned());
        dz += &model.projection.backward(&cache, &dg, &mut grads.projection);
    }

    let loss = total_loss(rec, dev, con)?;
    if need_z {
        dz_all.slice_mut(s![.., ..n]).assign(&dz);
    }
    model.encoder.backward(&enc_cache, &dz_all, &mut grads.encoder);
    Ok(StepOutput { loss, deviation_cache })
}

/// Head-masked loss on held-out normal windows, in eval mode. The holdout
/// is cut into near-equal chunks of at most `batch_size`; the contrastive
/// term (a sum over anchors) is averaged per chunk.
pub(crate) fn holdout_loss<T: Real>(
    model: &ModelBundle<T>,
    holdout: &[SampleWindow],
    heads: Heads,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if holdout.is_empty() {
        return Err(Error::Training("holdout set is empty".into()));
    }
    let chunks = holdout.len().div_ceil(cfg.batch_size.max(1));
    let size = holdout.len().div_ceil(chunks);
    let (mut rec, mut dev, mut con) = (0.0, 0.0, 0.0);
    let mut con_chunks = 0usize;
    for chunk in holdout.chunks(size) {
        let views: Vec<ArrayView2<f32>> = chunk.iter().map(|w| w.values.view()).collect();
        let labels: Vec<f64> = chunk.iter().map(|w| w.label).collect();
        let weight = chunk.len() as f64 / holdout.len() as f64;
        if heads.rec {
            let x_hat: Vec<Array2<f64>> =
                model.masked_reconstruct_batch(&views)?.iter().map(|a| to_f64(a.view())).collect();
            let xs: Vec<Array2<f64>> = chunk.iter().map(|w| w.values.mapv(f64::from)).collect();
            let hv: Vec<_> = x_hat.iter().map(|a| a.view()).collect();
            let xv: Vec<_> = xs.iter().map(|a| a.view()).collect();
            rec += weight * reconstruction_loss(&hv, &xv, &labels)?;
        }
        if heads.dev || heads.con {
            let z = model.encode(&model.stack(&views)?);
            if heads.dev {
                let scores: Vec<f64> = model.deviation_scores(&z).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                dev += weight * deviation_loss(&scores, &labels, cfg.margin)?;
            }
            if heads.con && chunk.len() >= 2 {
                let g = to_f64(model.projections(&z).view());
                let cb = batch_from_columns(g.view(), &labels, cfg.temperature)?;
                con += if cfg.vsc { vanilla_supervised_contrastive_loss(&cb)? } else { contrastive_loss(&cb)? };
                con_chunks += 1;
            }
        }
    }
    if con_chunks > 0 {
        con /= con_chunks as f64;
    }
    total_loss(rec, dev, con)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::gradcheck::rel_err;
    use crate::nn::Params;
    use rand::{Rng, SeedableRng};

    fn tiny_model() -> ModelBundle<f64> {
        let cfg = ModelConfig {
            channels: 2,
            embed_dim: 3,
            proj_dim: 2,
            dev_hidden: 3,
            dilations: vec![1, 2],
            dropout: 0.25,
            ..ModelConfig::new(2, 5)
        };
        ModelBundle::new(cfg, 4).unwrap()
    }

    fn tiny_batch() -> Vec<SampleWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = |id: usize, label: f64| {
            let x = Array2::from_shape_simple_fn((2, 5), || rng.random_range(-1.0f32..1.0));
            let tag = if label == 0.0 { "normal" } else { "A" };
            SampleWindow::new(format!("w{id}"), x, label, tag).unwrap()
        };
        vec![w(0, 0.0), w(1, 0.0), w(2, 1.0), w(3, 0.0), w(4, 0.35)]
    }

    /// Loss of the whole pipeline with a fixed rng stream, for differencing.
    fn loss_of(model: &ModelBundle<f64>, batch: &[SampleWindow], heads: Heads, cfg: &TrainConfig) -> f64 {
        let mut grads = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        forward_backward(model, &mut grads, batch, heads, cfg, &mut rng).unwrap().loss.total
    }

    fn check(heads: Heads, vsc: bool) {
        let model = tiny_model();
        assert!(model.num_params() <= 1000, "{}", model.num_params());
        let batch = tiny_batch();
        let cfg = TrainConfig { vsc, rec_vars_per_sample: Some(1), ..TrainConfig::default() };
        let mut grads = model.clone();
        grads.zero();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        forward_backward(&model, &mut grads, &batch, heads, &cfg, &mut rng).unwrap();
        let analytic: Vec<Vec<f64>> = grads.params().iter().map(|p| p.to_vec()).collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for g in 0..analytic.len() {
            for i in 0..analytic[g].len() {
                let mut p = model.clone();
                p.params_mut()[g][i] += h;
                let mut q = model.clone();
                q.params_mut()[g][i] -= h;
                let num = (loss_of(&p, &batch, heads, &cfg) - loss_of(&q, &batch, heads, &cfg)) / (2.0 * h);
                worst = worst.max(rel_err(analytic[g][i], num));
            }
        }
        assert!(worst < 1e-4, "{heads} vsc={vsc}: {worst}");
    }

    #[test]
    fn end_to_end_gradients_per_head() {
        check(Heads::REC, false);
        check(Heads::DEV, false);
        check(Heads::CON, false);
        check(Heads::CON, true);
        check(Heads::ALL, false);
    }

    #[test]
    fn inactive_heads_get_no_gradient() {
        let model = tiny_model();
        let mut grads = model.clone();
        grads.zero();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        forward_backward(&model, &mut grads, &tiny_batch(), Heads::REC, &TrainConfig::default(), &mut rng).unwrap();
        assert!(grads.deviation.params().iter().chain(grads.projection.params().iter()).all(|p| p.iter().all(|&v| v == 0.0)));
        assert!(grads.decoder.params().iter().any(|p| p.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn anomalies_do_not_reach_the_decoder() {
        // Changing only the anomalous windows leaves the rec-only gradient unchanged.
        let model = tiny_model();
        let batch = tiny_batch();
        let mut altered = batch.clone();
        for w in altered.iter_mut().filter(|w| w.is_anomalous()) {
            w.values.mapv_inplace(|v| v * 3.0 - 1.0);
        }
        let grad_of = |b: &[SampleWindow]| {
            let mut g = model.clone();
            g.zero();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            forward_backward(&model, &mut g, b, Heads::REC, &TrainConfig::default(), &mut rng).unwrap();
            g.params().iter().map(|p| p.to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(grad_of(&batch), grad_of(&altered));
    }

    #[test]
    fn counts_encoder_passes() {
        let model = tiny_model();
        let mut grads = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TrainConfig { rec_vars_per_sample: None, ..TrainConfig::default() };
        model.reset_pass_counter();
        forward_backward(&model, &mut grads, &tiny_batch(), Heads::ALL, &cfg, &mut rng).unwrap();
        // 5 windows plus K = 2 masked copies of each of the 3 normals
        assert_eq!(model.encoder_passes(), 5 + 6);
    }
}
