//! Two-stage training: the text-conditioned base denoiser, then the IEA and
//! TCA adapters on top of the frozen base.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use serde::{Deserialize, Serialize};

use crate::adapters::{encode_face, flip_embedding, stack_embeddings, AdapterRole, FaceEmbedding};
use crate::backbone::{Conditioning, Taps};
use crate::error::{Error, Result};
use crate::fusion::{dual_path_forward, DualPathOptions, FusionMode, PathwaySpec};
use crate::graph::{Graph, Var};
use crate::losses::{loss_fusion, loss_iea, loss_tca, mse, total_loss, LossWeights};
use crate::model::Model;
use crate::nn::{Binder, ParamStore};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{Real, Tensor};
use crate::toy::{null_caption, Dataset, Sample};

/// How the three loss terms reach the two adapters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradRouting {
    /// IEA weights follow `L_iea + L_fusion`, TCA weights `L_tca + L_fusion`.
    #[default]
    PerPathway,
    /// Both adapters follow the full sum.
    Global,
}

impl GradRouting {
    pub fn as_str(self) -> &'static str {
        match self {
            GradRouting::PerPathway => "per_pathway",
            GradRouting::Global => "global",
        }
    }
}

impl std::str::FromStr for GradRouting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_pathway" => Ok(GradRouting::PerPathway),
            "global" => Ok(GradRouting::Global),
            _ => Err(Error::Parameter(format!("unknown gradient routing `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a caption by null tokens (base stage only).
    pub text_dropout: f64,
    /// Probability of mirroring the face embedding (adapter stage only).
    pub flip_prob: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub fusion: FusionMode,
    pub private_streams: bool,
    pub routing: GradRouting,
    pub alpha_iea: f64,
    pub alpha_tca: f64,
    /// Decay of the exponential moving average of the trained weights that
    /// replaces them at the end of training; 0 keeps the raw weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 1e-3,
            text_dropout: 0.1,
            flip_prob: 0.5,
            seed: 0,
            weights: LossWeights::default(),
            fusion: FusionMode::Blended,
            private_streams: false,
            routing: GradRouting::PerPathway,
            alpha_iea: AdapterRole::Iea.default_alpha(),
            alpha_tca: AdapterRole::Tca.default_alpha(),
            ema_decay: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, p) in [("text dropout", self.text_dropout), ("flip probability", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Parameter(format!("EMA decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }
}

/// Adam with bias correction; state is keyed by parameter name so updates
/// run in a fixed order.
#[derive(Clone, Debug)]
pub struct Adam<S: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (one, step, eps) = (S::one(), S::lit(self.lr / c1), S::lit(self.eps));
        let inv_c2 = S::lit(1.0 / c2);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Structural(format!("gradient shape mismatch for `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let iter = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((p, m), v), &g) in iter {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of a set of parameters.
#[derive(Clone, Debug)]
pub struct Ema<S: Real> {
    pub decay: f64,
    shadow: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> Ema<S> {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            shadow: BTreeMap::new(),
        }
    }

    /// Fold the current values of `names` into the average; a name seen for
    /// the first time starts at its current value.
    pub fn update<'n>(&mut self, params: &ParamStore<S>, names: impl IntoIterator<Item = &'n String>) -> Result<()> {
        let (d, one) = (S::lit(self.decay), S::one());
        for name in names {
            let p = params.get(name)?;
            match self.shadow.get_mut(name) {
                Some(e) => {
                    for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
                        *e = d * *e + (one - d) * p;
                    }
                }
                None => {
                    self.shadow.insert(name.clone(), (**p).clone());
                }
            }
        }
        Ok(())
    }

    /// Overwrite the tracked parameters with their averages.
    pub fn apply(&self, params: &mut ParamStore<S>) -> Result<()> {
        for (name, e) in &self.shadow {
            *params.get_mut(name)? = e.clone();
        }
        Ok(())
    }
}

fn grad_norm<S: Real>(grads: &BTreeMap<String, Tensor<S>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Loss terms of one optimizer step; the base stage fills only `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub l_iea: f64,
    pub l_tca: f64,
    pub l_fusion: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<StepLoss>,
}

impl TrainLog {
    pub fn write_base_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss")?;
        for r in &self.rows {
            writeln!(w, "{},{}", r.step, r.total)?;
        }
        Ok(())
    }

    pub fn write_adapter_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,l_iea,l_tca,l_fusion,total")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.step, r.l_iea, r.l_tca, r.l_fusion, r.total)?;
        }
        Ok(())
    }

    /// Mean total loss over the first and last `n` rows.
    pub fn head_tail_means(&self, n: usize) -> Option<(f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = n.clamp(1, self.rows.len());
        let mean = |rows: &[StepLoss]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..n]), mean(&self.rows[self.rows.len() - n..])))
    }
}

/// One minibatch at image resolution.
pub struct Batch<S: Real> {
    pub x0: Tensor<S>,
    /// `[B, 1, H, W]`
    pub mask: Tensor<S>,
    pub faces: Vec<FaceEmbedding>,
    pub tokens: Vec<Vec<usize>>,
    pub noise: Tensor<S>,
    pub t: Vec<usize>,
}

pub fn gaussian<S: Real, R: Rng>(rng: &mut R, shape: impl Into<Vec<usize>>) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.sample::<f64, _>(StandardNormal)))
}

fn sample_batch<S: Real>(
    samples: &[&Sample],
    rng: &mut ChaCha8Rng,
    schedule: &DiffusionSchedule,
    text_dropout: f64,
    flip_prob: f64,
) -> Result<Batch<S>> {
    let mut x0 = Vec::with_capacity(samples.len());
    let mut mask = Vec::with_capacity(samples.len());
    let mut faces = Vec::with_capacity(samples.len());
    let mut tokens = Vec::with_capacity(samples.len());
    for s in samples {
        x0.push(s.image.cast::<S>());
        mask.push(s.face_mask.to_tensor::<S>());
        let face = encode_face(&s.image, s.face_bbox)?;
        faces.push(if rng.gen_bool(flip_prob) { flip_embedding(&face) } else { face });
        let caption = if rng.gen_bool(text_dropout) {
            null_caption()
        } else {
            s.caption.tokens()
        };
        tokens.push(caption.to_vec());
    }
    let x0 = Tensor::stack_batch(&x0)?;
    let noise = gaussian(rng, x0.shape().to_vec());
    let t = (0..samples.len()).map(|_| rng.gen_range(0..schedule.num_steps())).collect();
    Ok(Batch {
        x0,
        mask: Tensor::stack_batch(&mask)?,
        faces,
        tokens,
        noise,
        t,
    })
}

/// `x_t` for a batch whose items carry their own timesteps.
pub fn noisy_batch<S: Real>(batch: &Batch<S>, schedule: &DiffusionSchedule) -> Result<Tensor<S>> {
    let items = (0..batch.t.len())
        .map(|i| {
            crate::schedule::add_noise(
                &batch.x0.batch_item(i)?,
                &batch.noise.batch_item(i)?,
                batch.t[i],
                schedule,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

fn draw_samples<'d>(data: &'d Dataset, rng: &mut ChaCha8Rng, n: usize) -> Vec<&'d Sample> {
    (0..n).map(|_| &data.samples[rng.gen_range(0..data.len())]).collect()
}

fn check_finite(step: usize, loss: f64, lr: f64, grad_norm: f64) -> Result<()> {
    if loss.is_finite() && grad_norm.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            loss,
            lr,
            grad_norm,
        })
    }
}

/// Stage 1: text-conditioned noise prediction with every base weight
/// trainable. Adapter weights, if present, are left untouched.
pub fn train_base<S: Real>(
    model: &mut Model<S>,
    data: &Dataset,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLoss),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("training needs a nonempty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut ema = (cfg.ema_decay > 0.0).then(|| Ema::new(cfg.ema_decay));
    let mut log = TrainLog::default();
    let mut last_norm = 0.0;
    for step in 0..cfg.steps {
        let picked = draw_samples(data, &mut rng, cfg.batch_size);
        let batch = sample_batch::<S>(&picked, &mut rng, schedule, cfg.text_dropout, 0.0)?;
        let x_t = noisy_batch(&batch, schedule)?;
        let (loss, grads) = {
            let g = Graph::new();
            let b = Binder::new(&g, &model.params, |n| n.starts_with("base."));
            let text = model.backbone.embed_text(&b, &batch.tokens)?;
            let cond = Conditioning { text, image: None };
            let out = model.backbone.forward(&b, &g.constant(x_t), &batch.t, cond, Taps::NONE)?;
            let loss = mse(&g.constant(batch.noise.clone()), &out.eps)?;
            let lv = loss.value().item().as_f64();
            check_finite(step, lv, cfg.lr, last_norm)?;
            (lv, b.gradients(&g.backward(&loss)?))
        };
        last_norm = grad_norm(&grads);
        check_finite(step, loss, cfg.lr, last_norm)?;
        adam.step(&mut model.params, &grads)?;
        if let Some(ema) = ema.as_mut() {
            ema.update(&model.params, grads.keys())?;
        }
        let row = StepLoss {
            step,
            l_iea: 0.0,
            l_tca: 0.0,
            l_fusion: 0.0,
            total: loss,
        };
        on_step(&row);
        log.rows.push(row);
    }
    if let Some(ema) = ema {
        ema.apply(&mut model.params)?;
    }
    Ok(log)
}

/// Scalar loss terms of one dual-path forward.
pub struct DualLoss<'g, S: Real> {
    pub l_iea: Var<'g, S>,
    pub l_tca: Var<'g, S>,
    pub l_fusion: Var<'g, S>,
    pub total: Var<'g, S>,
}

/// Build the dual-path forward and its three loss terms for one batch.
#[allow(clippy::too_many_arguments)]
pub fn dual_loss<'g, S: Real>(
    model: &Model<S>,
    b: &Binder<'g, S>,
    x_t: &Tensor<S>,
    t: &[usize],
    tokens: &[Vec<usize>],
    faces: &Tensor<S>,
    mask: &Tensor<S>,
    noise: &Tensor<S>,
    cfg: &TrainConfig,
) -> Result<DualLoss<'g, S>> {
    let g = b.graph();
    let text = model.backbone.embed_text(b, tokens)?;
    let path_a = PathwaySpec::new(AdapterRole::Iea.prefix(), cfg.alpha_iea);
    let path_b = PathwaySpec::new(AdapterRole::Tca.prefix(), cfg.alpha_tca);
    let m = g.constant(mask.clone());
    let opts = DualPathOptions {
        mode: cfg.fusion,
        private_streams: cfg.private_streams,
        taps: Taps::NONE,
    };
    let out = dual_path_forward(
        &model.backbone,
        b,
        &model.adapter,
        &g.constant(x_t.clone()),
        t,
        &text,
        &g.constant(faces.clone()),
        &path_a,
        &path_b,
        &m,
        opts,
    )?;
    let n = g.constant(noise.clone());
    let l_iea = loss_iea(&n, &out.eps_a, &m)?;
    let l_tca = loss_tca(&n, &out.eps_b, &m)?;
    let l_fusion = loss_fusion(&n, &out.eps_fused)?;
    let total = total_loss(&l_iea, &l_tca, &l_fusion, cfg.weights)?;
    Ok(DualLoss {
        l_iea,
        l_tca,
        l_fusion,
        total,
    })
}

fn is_adapter_param(name: &str) -> bool {
    AdapterRole::ALL.iter().any(|r| name.starts_with(&format!("{}.", r.prefix())))
}

/// Gradients of the adapter weights under the configured routing.
pub fn routed_gradients<S: Real>(
    b: &Binder<'_, S>,
    loss: &DualLoss<'_, S>,
    routing: GradRouting,
    w: LossWeights,
) -> Result<BTreeMap<String, Tensor<S>>> {
    let g = b.graph();
    match routing {
        GradRouting::Global => Ok(b.gradients(&g.backward(&loss.total)?)),
        GradRouting::PerPathway => {
            let fus = loss.l_fusion.scale(w.fusion);
            let mut out = BTreeMap::new();
            for (role, term, wt) in [
                (AdapterRole::Iea, loss.l_iea, w.iea),
                (AdapterRole::Tca, loss.l_tca, w.tca),
            ] {
                let root = term.scale(wt).add(&fus)?;
                let prefix = format!("{}.", role.prefix());
                out.extend(
                    b.gradients(&g.backward(&root)?)
                        .into_iter()
                        .filter(|(n, _)| n.starts_with(&prefix)),
                );
            }
            Ok(out)
        }
    }
}

/// Stage 2: only `iea.*` and `tca.*` weights are updated; `base.*` stays
/// byte-identical.
pub fn train_adapters<S: Real>(
    model: &mut Model<S>,
    data: &Dataset,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLoss),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("training needs a nonempty dataset".into()));
    }
    for role in AdapterRole::ALL {
        if !model.has_adapter(role.prefix()) {
            return Err(Error::State(format!("model has no `{}` adapter weights", role.prefix())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EC0_4D57);
    let mut adam = Adam::new(cfg.lr);
    let mut ema = (cfg.ema_decay > 0.0).then(|| Ema::new(cfg.ema_decay));
    let mut log = TrainLog::default();
    let mut last_norm = 0.0;
    for step in 0..cfg.steps {
        let picked = draw_samples(data, &mut rng, cfg.batch_size);
        let batch = sample_batch::<S>(&picked, &mut rng, schedule, 0.0, cfg.flip_prob)?;
        let x_t = noisy_batch(&batch, schedule)?;
        let faces = stack_embeddings::<S>(&batch.faces);
        let (row, grads) = {
            let g = Graph::new();
            let b = Binder::new(&g, &model.params, is_adapter_param);
            let loss = dual_loss(
                model,
                &b,
                &x_t,
                &batch.t,
                &batch.tokens,
                &faces,
                &batch.mask,
                &batch.noise,
                cfg,
            )?;
            let val = |v: &Var<'_, S>| v.value().item().as_f64();
            let row = StepLoss {
                step,
                l_iea: val(&loss.l_iea),
                l_tca: val(&loss.l_tca),
                l_fusion: val(&loss.l_fusion),
                total: val(&loss.total),
            };
            check_finite(step, row.total, cfg.lr, last_norm)?;
            (row, routed_gradients(&b, &loss, cfg.routing, cfg.weights)?)
        };
        last_norm = grad_norm(&grads);
        check_finite(step, row.total, cfg.lr, last_norm)?;
        adam.step(&mut model.params, &grads)?;
        if let Some(ema) = ema.as_mut() {
            ema.update(&model.params, grads.keys())?;
        }
        on_step(&row);
        log.rows.push(row);
    }
    if let Some(ema) = ema {
        ema.apply(&mut model.params)?;
    }
    Ok(log)
}

/// One analytic-vs-numeric comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub max_rel_err: f64,
    /// Every parameter that received an analytic gradient.
    pub grad_names: Vec<String>,
    pub loss: f64,
}

/// Fixed inputs for a gradient check, batch size 1.
#[derive(Clone, Debug)]
pub struct GradCheckInput<S: Real> {
    pub x_t: Tensor<S>,
    pub t: usize,
    pub tokens: Vec<usize>,
    pub face: FaceEmbedding,
    pub mask: Tensor<S>,
    pub noise: Tensor<S>,
}

/// Central differences of the total loss on `n_params` randomly chosen
/// adapter scalars against the backpropagated gradient.
pub fn grad_check<S: Real>(
    model: &Model<S>,
    input: &GradCheckInput<S>,
    cfg: &TrainConfig,
    n_params: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let faces = stack_embeddings::<S>(&[input.face]);
    let tokens = [input.tokens.clone()];
    let eval = |params: &ParamStore<S>| -> Result<f64> {
        let g = Graph::inference();
        let b = Binder::frozen(&g, params);
        let l = dual_loss(model, &b, &input.x_t, &[input.t], &tokens, &faces, &input.mask, &input.noise, cfg)?;
        let v = l.total.value().item().as_f64();
        Ok(v)
    };
    let (loss, grads) = {
        let g = Graph::new();
        let b = Binder::new(&g, &model.params, is_adapter_param);
        let l = dual_loss(model, &b, &input.x_t, &[input.t], &tokens, &faces, &input.mask, &input.noise, cfg)?;
        let loss = l.total.value().item().as_f64();
        (loss, b.gradients(&g.backward(&l.total)?))
    };
    let names: Vec<&String> = grads.keys().collect();
    if names.is_empty() {
        return Err(Error::State("no adapter parameters to check".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::with_capacity(n_params);
    let mut params = model.params.clone();
    for _ in 0..n_params {
        let name = names[rng.gen_range(0..names.len())].clone();
        let numel = grads[&name].numel();
        let index = rng.gen_range(0..numel);
        let orig = params.get(&name)?.data()[index];
        let h = S::lit(epsilon);
        params.get_mut(&name)?.data_mut()[index] = orig + h;
        let plus = eval(&params)?;
        params.get_mut(&name)?.data_mut()[index] = orig - h;
        let minus = eval(&params)?;
        params.get_mut(&name)?.data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads[&name].data()[index].as_f64();
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        checks.push(ParamCheck {
            name,
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checks,
        max_rel_err,
        grad_names: grads.keys().cloned().collect(),
        loss,
    })
}

/// The dual-path prediction itself, so a check input can be built whose
/// noise target is matched exactly (zero loss).
pub fn predicted_noise<S: Real>(model: &Model<S>, input: &GradCheckInput<S>, cfg: &TrainConfig) -> Result<Tensor<S>> {
    let g = Graph::inference();
    let b = Binder::frozen(&g, &model.params);
    let text = model.backbone.embed_text(&b, std::slice::from_ref(&input.tokens))?;
    let opts = DualPathOptions {
        mode: cfg.fusion,
        private_streams: cfg.private_streams,
        taps: Taps::NONE,
    };
    let out = dual_path_forward(
        &model.backbone,
        &b,
        &model.adapter,
        &g.constant(input.x_t.clone()),
        &[input.t],
        &text,
        &g.constant(stack_embeddings(&[input.face])),
        &PathwaySpec::new(AdapterRole::Iea.prefix(), cfg.alpha_iea),
        &PathwaySpec::new(AdapterRole::Tca.prefix(), cfg.alpha_tca),
        &g.constant(input.mask.clone()),
        opts,
    )?;
    let eps = out.eps_fused.value();
    Ok((*eps).clone())
}

/// An 8×8 double-precision model with random adapters and one random
/// sample, small enough for finite differences.
pub fn tiny_check_setup(seed: u64) -> Result<(Model<f64>, GradCheckInput<f64>)> {
    use crate::adapters::{AdapterConfig, FACE_DIM};
    use crate::backbone::BackboneConfig;
    let config = BackboneConfig {
        image_size: 8,
        base_channels: 4,
        channel_mults: vec![1, 2],
        attention_levels: vec![1],
        heads: 2,
        text_dim: 8,
        time_dim: 8,
        vocab_size: crate::toy::VOCAB_SIZE,
        norm_groups: 2,
        image_null_key: true,
    };
    let adapter = AdapterConfig {
        n_tokens: 2,
        hidden: 8,
        token_dim: 8,
    };
    let mut model = Model::init_base(config, adapter, seed)?;
    model.init_adapters(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut face = [0f32; FACE_DIM];
    for v in &mut face {
        *v = rng.gen_range(-1.0..1.0);
    }
    let caption = crate::toy::Caption::all()[rng.gen_range(0..24)];
    let input = GradCheckInput {
        x_t: gaussian(&mut rng, [1, 3, 8, 8]),
        t: rng.gen_range(0..1000),
        tokens: caption.tokens().to_vec(),
        face,
        mask: Tensor::from_fn([1, 1, 8, 8], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }),
        noise: gaussian(&mut rng, [1, 3, 8, 8]),
    };
    Ok((model, input))
}
