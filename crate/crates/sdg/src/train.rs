//! Joint training of the text encoder and denoiser on the epsilon-prediction
//! objective, with conditioning dropout for classifier-free guidance, Adam,
//! and an EMA copy of the weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::ModelWeights;
use crate::dataset::Sample;
use crate::error::{Result, SdgError};
use crate::pipeline::{encode_image, DiffusionConfig};
use crate::schedule::NoiseSchedule;
use crate::tape::{NodeId, Tape, Tn};
use crate::unet::Conditioning;
use crate::vocab::{tokenize, TokenSequence, Vocabulary};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Probability a caption is replaced with the empty prompt.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Record the loss every this many steps (step 0 always recorded).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1200,
            batch: 4,
            lr: 2e-3,
            ema_decay: 0.995,
            cond_dropout: 0.1,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(SdgError::Config("cond_dropout must be in [0,1)".into()));
        }
        if self.batch == 0 || self.lr <= 0.0 {
            return Err(SdgError::Config("batch and lr must be positive".into()));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: &[usize], lr: f64) -> Adam {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [(String, &mut Tn<Real>)], grads: &[Vec<Real>]) {
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t as i32);
        let bc2 = 1.0 - Self::B2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data.iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= (self.lr * mh / (vh.sqrt() + Self::EPS)) as Real;
            }
        }
    }
}

pub struct TrainOutput {
    /// EMA weights; what inference should use.
    pub model: ModelWeights,
    /// The raw (non-averaged) weights at the final step.
    pub raw: ModelWeights,
    /// (step, loss) at `log_every` intervals.
    pub losses: Vec<(usize, f64)>,
}

fn draw_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as Real
        })
        .collect()
}

/// Single-batch loss and parameter gradients, batch items summed on one tape.
fn batch_pass(
    model: &ModelWeights,
    schedule: &NoiseSchedule<Real>,
    items: &[(TokenSequence, Vec<Real>, usize, Vec<Real>)],
    time_dim: usize,
) -> Result<(f64, Vec<Vec<Real>>)> {
    let mut tape: Tape<Real> = Tape::new();
    let enc_nodes = model.encoder.leaves(&mut tape);
    let unet_nodes = model.unet.leaves(&mut tape);
    let mut param_ids: Vec<NodeId> = enc_nodes.param_ids();
    param_ids.extend_from_slice(unet_nodes.param_ids());

    let mut losses = Vec::with_capacity(items.len());
    for (tokens, z0, t, eps) in items {
        let abar = schedule.alpha_bar(*t);
        let a = abar.sqrt();
        let b = (1.0 - abar).sqrt();
        let zt: Vec<Real> = z0.iter().zip(eps.iter()).map(|(&z, &e)| a * z + b * e).collect();
        let ids: Vec<usize> = tokens.ids().iter().map(|&i| i as usize).collect();
        let ctx = model.encoder.forward(&mut tape, &enc_nodes, &ids);
        let cz = model.unet.config.latent_channels;
        let z_leaf = tape.leaf(Tn::from_vec(&[cz, 16, 16], zt));
        let temb = tape.leaf(crate::unet::time_features(*t, time_dim));
        let (pred, _) =
            model.unet.forward(&mut tape, &unet_nodes, z_leaf, temb, &Conditioning::Node(ctx))?;
        let target = tape.leaf(Tn::from_vec(&[cz, 16, 16], eps.clone()));
        losses.push(tape.mse_loss(pred, target));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l);
    }
    let total = tape.scale(total, 1.0 / items.len() as Real);
    let loss = tape.value(total).data[0] as f64;
    tape.backward(total);
    let grads = param_ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.data.clone())
                .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
        })
        .collect();
    Ok((loss, grads))
}

/// Loss of the EMA-free weights on a fixed batch; used to verify training
/// makes progress.
pub fn eval_loss(
    model: &ModelWeights,
    vocab: &Vocabulary,
    dataset: &[Sample],
    diffusion: &DiffusionConfig,
    seed: u64,
) -> Result<f64> {
    let schedule = diffusion.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cz = model.unet.config.latent_channels;
    let mut items = Vec::new();
    for i in 0..8.min(dataset.len()) {
        let s = &dataset[i];
        let tokens = tokenize(&s.caption, vocab)?;
        let z0 = encode_image(&s.image);
        let t = rng.gen_range(1..=schedule.steps());
        let eps = draw_normal(&mut rng, cz * 16 * 16);
        items.push((tokens, z0, t, eps));
    }
    let (loss, _) = batch_pass(model, &schedule, &items, model.unet.config.time_dim)?;
    Ok(loss)
}

pub fn train(
    dataset: &[Sample],
    init: ModelWeights,
    vocab: &Vocabulary,
    diffusion: &DiffusionConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(SdgError::Config("empty training dataset".into()));
    }
    let schedule = diffusion.schedule()?;
    let mut model = init;
    let mut ema = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cz = model.unet.config.latent_channels;
    let time_dim = model.unet.config.time_dim;

    let sizes: Vec<usize> = model
        .encoder
        .tensors()
        .iter()
        .chain(model.unet.tensors().iter())
        .map(|(_, t)| t.len())
        .collect();
    let mut adam = Adam::new(&sizes, cfg.lr);

    // Latents are precomputed once; the dataset is deterministic.
    let latents: Vec<Vec<Real>> = dataset.iter().map(|s| encode_image(&s.image)).collect();
    let empty = TokenSequence::empty(vocab);

    let mut losses = Vec::new();
    for step in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let idx = rng.gen_range(0..dataset.len());
            let dropped = rng.gen_bool(cfg.cond_dropout);
            let tokens = if dropped {
                empty.clone()
            } else {
                tokenize(&dataset[idx].caption, vocab)?
            };
            let t = rng.gen_range(1..=schedule.steps());
            let eps = draw_normal(&mut rng, cz * 16 * 16);
            items.push((tokens, latents[idx].clone(), t, eps));
        }
        let (loss, grads) = batch_pass(&model, &schedule, &items, time_dim)?;
        if !loss.is_finite() {
            return Err(SdgError::DivergedLoss(step));
        }
        if step % cfg.log_every == 0 {
            losses.push((step, loss));
        }
        let mut params: Vec<(String, &mut Tn<Real>)> = model
            .encoder
            .tensors_mut()
            .into_iter()
            .chain(model.unet.tensors_mut())
            .collect();
        adam.step(&mut params, &grads);
        drop(params);

        let d = cfg.ema_decay as Real;
        for ((_, e), (_, w)) in ema
            .encoder
            .tensors_mut()
            .into_iter()
            .chain(ema.unet.tensors_mut())
            .zip(model.encoder.tensors().into_iter().chain(model.unet.tensors()))
        {
            for (ev, &wv) in e.data.iter_mut().zip(w.data.iter()) {
                *ev = d * *ev + (1.0 - d) * wv;
            }
        }
    }
    Ok(TrainOutput { model: ema, raw: model, losses })
}
