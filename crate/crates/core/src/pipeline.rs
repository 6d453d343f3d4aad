//! End-to-end generation: an attention-derived face mask from a TCA-only
//! pass, then dual-path sampling from the same initial noise. Also the
//! evaluation, ablation and α-sweep harnesses built on top of it.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{encode_face, project_embedding, stack_embeddings, AdapterRole, FaceEmbedding};
use crate::backbone::{AttnRecord, Conditioning, ImagePrompt, Taps};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{dual_path_forward, DualPathOptions, FusionMode, PathwaySpec};
use crate::graph::Graph;
use crate::image::{encode_png_gray, encode_png_mask, encode_png_rgb, to_rgb8, write_bytes, BBox, ImageTensor, RegionMask};
use crate::losses::eager::fuse_noise;
use crate::mask::{mask_from_heatmap, HeatmapAccumulator, MaskResult};
use crate::model::Model;
use crate::nn::Binder;
use crate::schedule::{cfg_combine, ddim_step, DiffusionSchedule};
use crate::tensor::Tensor;
use crate::toy::{face_score, null_caption, reference_sample, text_match_score, Caption, Dataset, IdentitySpec, Sample};
use crate::training::{gaussian, train_adapters, train_base, StepLoss, TrainLog};

/// Which training stage a loss row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base,
    Adapters,
}

/// Stage 1 then stage 2 from fresh weights, with step counts and settings
/// taken from the config.
pub fn train_from_scratch(
    cfg: &RunConfig,
    data: &Dataset,
    mut on_step: impl FnMut(Stage, &StepLoss),
) -> Result<(Model<f32>, TrainLog, TrainLog)> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut model = Model::init_base(cfg.backbone_config(), cfg.adapter_config(), cfg.seed)?;
    let base_log = train_base(&mut model, data, &schedule, &cfg.base_train_config(), |r| {
        on_step(Stage::Base, r)
    })?;
    model.init_adapters(cfg.seed)?;
    let adapter_log = train_adapters(&mut model, data, &schedule, &cfg.adapter_train_config(), |r| {
        on_step(Stage::Adapters, r)
    })?;
    Ok((model, base_log, adapter_log))
}

/// Largest number of prompts sampled together.
const CHUNK: usize = 16;

/// One image to sample: caption, face embedding and the seed of its
/// initial noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub caption: Caption,
    pub face: FaceEmbedding,
    pub seed: u64,
}

/// Which conditioning produces the noise prediction.
#[derive(Clone, Debug, PartialEq)]
pub enum Route {
    Single(PathwaySpec),
    /// `a` rules the face region, `b` the rest.
    Dual {
        a: PathwaySpec,
        b: PathwaySpec,
        mode: FusionMode,
    },
}

/// splitmix64 over the parts, for reproducible per-image seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

struct Recording<'a> {
    steps: Option<&'a [usize]>,
    layers: Option<&'a [String]>,
    accs: Vec<HeatmapAccumulator>,
}

impl Recording<'_> {
    fn take(&mut self, step: usize, records: &[AttnRecord]) -> Result<()> {
        if self.steps.is_some_and(|s| !s.contains(&step)) {
            return Ok(());
        }
        for r in records {
            if self.layers.is_some_and(|l| !l.contains(&r.layer)) {
                continue;
            }
            for (i, acc) in self.accs.iter_mut().enumerate() {
                acc.add(r, i)?;
            }
        }
        Ok(())
    }
}

pub struct Pipeline<'m> {
    model: &'m Model<f32>,
    cfg: &'m RunConfig,
    schedule: DiffusionSchedule,
    timesteps: Vec<usize>,
}

impl<'m> Pipeline<'m> {
    pub fn new(model: &'m Model<f32>, cfg: &'m RunConfig) -> Result<Self> {
        cfg.validate()?;
        if model.backbone.config() != &cfg.backbone_config() {
            return Err(Error::Parameter("model architecture differs from the config".into()));
        }
        let schedule = cfg.schedule()?;
        let timesteps = schedule.ddim_timesteps(cfg.ddim_steps)?;
        Ok(Self {
            model,
            cfg,
            schedule,
            timesteps,
        })
    }

    pub fn config(&self) -> &RunConfig {
        self.cfg
    }

    /// The face-side and text-side pathways implied by the config and the
    /// adapter groups present in the weights.
    pub fn pathways(&self) -> Result<(PathwaySpec, PathwaySpec)> {
        let groups = self.model.adapter_groups();
        if self.cfg.training_free {
            if groups.len() != 1 {
                return Err(Error::Parameter(format!(
                    "training-free fusion needs exactly one adapter, checkpoint has {}",
                    groups.len()
                )));
            }
            let name = groups[0].prefix();
            Ok((
                PathwaySpec::new(name, self.cfg.alpha_strong),
                PathwaySpec::new(name, self.cfg.alpha_weak),
            ))
        } else {
            if groups.len() != 2 {
                return Err(Error::Parameter(
                    "dual-adapter generation needs both iea and tca weights".into(),
                ));
            }
            Ok((
                PathwaySpec::new(AdapterRole::Iea.prefix(), self.cfg.alpha_iea),
                PathwaySpec::new(AdapterRole::Tca.prefix(), self.cfg.alpha_tca),
            ))
        }
    }

    fn initial_noise(&self, prompts: &[Prompt]) -> Result<(Tensor<f32>, Vec<ChaCha8Rng>)> {
        let n = self.cfg.image_size;
        let mut rngs: Vec<ChaCha8Rng> = prompts.iter().map(|p| ChaCha8Rng::seed_from_u64(p.seed)).collect();
        let items: Vec<Tensor<f32>> = rngs.iter_mut().map(|r| gaussian(r, [1, 3, n, n])).collect();
        Ok((Tensor::stack_batch(&items)?, rngs))
    }

    fn sample_inner(
        &self,
        prompts: &[Prompt],
        route: &Route,
        mask: Option<&Tensor<f32>>,
        mut rec: Option<&mut Recording<'_>>,
    ) -> Result<Tensor<f32>> {
        let bb = &self.model.backbone;
        let bsz = prompts.len();
        let (mut x, mut rngs) = self.initial_noise(prompts)?;
        let tokens: Vec<Vec<usize>> = prompts.iter().map(|p| p.caption.tokens().to_vec()).collect();
        let null: Vec<Vec<usize>> = vec![null_caption().to_vec(); bsz];
        let faces = stack_embeddings::<f32>(&prompts.iter().map(|p| p.face).collect::<Vec<_>>());
        let scale = self.cfg.guidance_scale;
        let taps = Taps {
            features: false,
            attention: rec.is_some(),
        };
        for (i, &t) in self.timesteps.iter().enumerate() {
            let t_prev = self.timesteps.get(i + 1).copied();
            let ts = vec![t; bsz];
            let g = Graph::inference();
            let b = Binder::frozen(&g, &self.model.params);
            let xv = g.constant(x.clone());
            let text = bb.embed_text(&b, &tokens)?;
            let face = g.constant(faces.clone());
            let uncond = if scale != 1.0 {
                let cond = Conditioning {
                    text: bb.embed_text(&b, &null)?,
                    image: None,
                };
                Some((*bb.forward(&b, &xv, &ts, cond, Taps::NONE)?.eps.value()).clone())
            } else {
                None
            };
            let guide = |eps: &Tensor<f32>| match &uncond {
                Some(u) => cfg_combine(u, eps, scale),
                None => Ok(eps.clone()),
            };
            let eps = match route {
                Route::Single(p) => {
                    let prompt_tokens = project_embedding(&b, &face, &p.adapter, self.model.adapter.n_tokens, self.model.adapter.token_dim)?;
                    let cond = Conditioning {
                        text,
                        image: Some(ImagePrompt {
                            tokens: prompt_tokens,
                            adapter: &p.adapter,
                            alpha: p.alpha,
                        }),
                    };
                    let out = bb.forward(&b, &xv, &ts, cond, taps)?;
                    if let Some(r) = rec.as_deref_mut() {
                        r.take(i, &out.attention)?;
                    }
                    guide(&out.eps.value())?
                }
                Route::Dual { a, b: pb, mode } => {
                    let m = mask.ok_or_else(|| Error::State("dual-path sampling needs a mask".into()))?;
                    let opts = DualPathOptions {
                        mode: *mode,
                        private_streams: self.cfg.private_streams,
                        taps,
                    };
                    let mv = g.constant(m.clone());
                    let out = dual_path_forward(bb, &b, &self.model.adapter, &xv, &ts, &text, &face, a, pb, &mv, opts)?;
                    if let Some(r) = rec.as_deref_mut() {
                        r.take(i, &out.attention_b)?;
                    }
                    if self.cfg.cfg_per_pathway {
                        fuse_noise(&guide(&out.eps_a.value())?, &guide(&out.eps_b.value())?, m)?
                    } else {
                        guide(&out.eps_fused.value())?
                    }
                }
            };
            let draw = if self.cfg.eta > 0.0 {
                let n = self.cfg.image_size;
                let items: Vec<Tensor<f32>> = rngs.iter_mut().map(|r| gaussian(r, [1, 3, n, n])).collect();
                Some(Tensor::stack_batch(&items)?)
            } else {
                None
            };
            x = ddim_step(&x, &eps, t, t_prev, &self.schedule, self.cfg.eta, draw.as_ref())?;
        }
        Ok(x)
    }

    /// Sample a batch of images along `route`; `mask` is `[B, 1, H, W]` and
    /// required for dual routes.
    pub fn sample(&self, prompts: &[Prompt], route: &Route, mask: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut out = Vec::with_capacity(prompts.len());
        for (c, chunk) in prompts.chunks(CHUNK).enumerate() {
            let m = match mask {
                Some(m) => Some(batch_range(m, c * CHUNK, chunk.len())?),
                None => None,
            };
            let x = self.sample_inner(chunk, route, m.as_ref(), None)?;
            for i in 0..chunk.len() {
                out.push(x.batch_item(i)?);
            }
        }
        Tensor::stack_batch(&out)
    }

    /// Phase 1: a text-side-only generation with attention recording,
    /// reduced to one face mask per prompt. Also returns the phase-1 images.
    pub fn generate_mask(&self, prompts: &[Prompt]) -> Result<(Vec<MaskResult>, Vec<ImageTensor>)> {
        let (_, text_side) = self.pathways()?;
        let route = Route::Single(text_side);
        let n = self.cfg.image_size;
        let mut masks = Vec::with_capacity(prompts.len());
        let mut images = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(CHUNK) {
            let mut rec = Recording {
                steps: self.cfg.record_steps.as_deref(),
                layers: self.cfg.record_layers.as_deref(),
                accs: vec![HeatmapAccumulator::new(n, n); chunk.len()],
            };
            let x = self.sample_inner(chunk, &route, None, Some(&mut rec))?;
            for (i, acc) in rec.accs.iter().enumerate() {
                masks.push(mask_from_heatmap(acc.finish()?, &self.cfg.mask_config())?);
                images.push(x.batch_item(i)?);
            }
        }
        Ok((masks, images))
    }

    /// Both phases for a batch of prompts.
    pub fn generate(&self, prompts: &[Prompt]) -> Result<Vec<Generated>> {
        let (a, b) = self.pathways()?;
        let route = Route::Dual {
            a,
            b,
            mode: self.cfg.fusion_mode,
        };
        let start = Instant::now();
        let (masks, _) = self.generate_mask(prompts)?;
        let mask_secs = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let stacked = stack_masks(&masks)?;
        let images = self.sample(prompts, &route, Some(&stacked))?;
        let fuse_secs = start.elapsed().as_secs_f64();
        let per = |s: f64| s / prompts.len().max(1) as f64;
        masks
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                Ok(Generated {
                    image: images.batch_item(i)?,
                    mask: m.mask.clone(),
                    mask_result: m,
                    mask_seconds: per(mask_secs),
                    fuse_seconds: per(fuse_secs),
                })
            })
            .collect()
    }
}

fn batch_range(t: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    let items = (start..start + len).map(|i| t.batch_item(i)).collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

fn stack_masks(masks: &[MaskResult]) -> Result<Tensor<f32>> {
    Tensor::stack_batch(&masks.iter().map(|m| m.mask.to_tensor::<f32>()).collect::<Vec<_>>())
}

/// One generated image with its mask.
#[derive(Clone, Debug)]
pub struct Generated {
    /// `[1, 3, H, W]`
    pub image: ImageTensor,
    pub mask: RegionMask,
    pub mask_result: MaskResult,
    pub mask_seconds: f64,
    pub fuse_seconds: f64,
}

/// Face score (when the identity is known), text match and mask stats.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub face_score: Option<f64>,
    pub text_match: f64,
    pub mask_area: usize,
    pub mask_fallback: bool,
    pub mask_seconds: f64,
    pub fuse_seconds: f64,
}

/// A generation request in image terms: the reference face is cropped from
/// `ref_image` at `ref_bbox`.
#[derive(Clone, Debug)]
pub struct Request {
    pub caption: Caption,
    pub ref_image: ImageTensor,
    pub ref_bbox: BBox,
    /// Enables the face score in the report.
    pub identity: Option<IdentitySpec>,
    pub seed: u64,
}

impl Request {
    /// Reference taken from the identity's canonical render.
    pub fn for_identity(identity: &IdentitySpec, caption: Caption, seed: u64) -> Self {
        let r = reference_sample(identity);
        Self {
            caption,
            ref_image: r.image,
            ref_bbox: r.face_bbox,
            identity: Some(*identity),
            seed,
        }
    }

    pub fn prompt(&self) -> Result<Prompt> {
        Ok(Prompt {
            caption: self.caption,
            face: encode_face(&self.ref_image, self.ref_bbox)?,
            seed: self.seed,
        })
    }
}

/// Generate one image per request and score it.
pub fn generate(model: &Model<f32>, cfg: &RunConfig, requests: &[Request]) -> Result<Vec<(Generated, Report)>> {
    let pipe = Pipeline::new(model, cfg)?;
    let prompts = requests.iter().map(Request::prompt).collect::<Result<Vec<_>>>()?;
    let out = pipe.generate(&prompts)?;
    out.into_iter()
        .zip(requests)
        .map(|(g, r)| {
            let report = Report {
                face_score: match &r.identity {
                    Some(id) => Some(face_score(&g.image, &g.mask, id)?),
                    None => None,
                },
                text_match: text_match_score(&g.image, &r.caption, &g.mask)?,
                mask_area: g.mask.count_on(),
                mask_fallback: g.mask_result.fallback_box,
                mask_seconds: g.mask_seconds,
                fuse_seconds: g.fuse_seconds,
            };
            Ok((g, report))
        })
        .collect()
}

/// Write the four mask-pipeline stages as grayscale PNGs.
pub fn dump_mask_panels(dir: &Path, stem: &str, m: &MaskResult) -> Result<()> {
    let (h, w) = (m.heatmap.height, m.heatmap.width);
    let heat: Vec<f32> = m.heatmap.values.iter().map(|&v| v as f32).collect();
    write_bytes(&dir.join(format!("{stem}_heatmap.png")), &encode_png_gray(h, w, &heat)?)?;
    let bits = |b: &[bool]| RegionMask::from_bools(h, w, b);
    write_bytes(
        &dir.join(format!("{stem}_thresholded.png")),
        &encode_png_mask(&bits(&m.thresholded.bits)?)?,
    )?;
    write_bytes(&dir.join(format!("{stem}_filtered.png")), &encode_png_mask(&bits(&m.filtered)?)?)?;
    write_bytes(&dir.join(format!("{stem}_mask.png")), &encode_png_mask(&m.mask)?)?;
    Ok(())
}

pub fn write_image_png(path: &Path, image: &ImageTensor) -> Result<()> {
    write_bytes(path, &encode_png_rgb(image)?)
}

pub fn write_mask_png(path: &Path, mask: &RegionMask) -> Result<()> {
    write_bytes(path, &encode_png_mask(mask)?)
}

/// Per-image metrics in the fixed CSV column order.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub identity_id: u32,
    pub caption: Caption,
    pub face_score: f64,
    pub text_match: f64,
    pub seed: u64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut w: W) -> Result<()> {
    writeln!(w, "identity_id,caption_tokens,face_score,text_match,seed")?;
    for r in rows {
        let t = r.caption.tokens();
        writeln!(
            w,
            "{},{} {} {},{},{},{}",
            r.identity_id, t[0], t[1], t[2], r.face_score, r.text_match, r.seed
        )?;
    }
    Ok(())
}

/// Means of both metrics; zeros for an empty table.
pub fn metric_means(rows: &[MetricRow]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.face_score).sum::<f64>() / n,
        rows.iter().map(|r| r.text_match).sum::<f64>() / n,
    )
}

/// Every identity paired with every evaluation caption.
pub fn evaluation_pairs(identities: &[IdentitySpec]) -> Vec<(IdentitySpec, Caption)> {
    identities
        .iter()
        .flat_map(|id| Caption::evaluation_set().into_iter().map(move |c| (*id, c)))
        .collect()
}

fn caption_index(c: &Caption) -> u64 {
    Caption::all().iter().position(|x| x == c).unwrap_or(0) as u64
}

/// Seed of image `k` for an (identity, caption) pair under a base seed.
pub fn image_seed(base: u64, identity: &IdentitySpec, caption: &Caption, k: usize) -> u64 {
    derive_seed(&[base, identity.id as u64, caption_index(caption), k as u64])
}

fn score_rows(
    images: &[ImageTensor],
    masks: &[RegionMask],
    jobs: &[(IdentitySpec, Caption, u64)],
) -> Result<Vec<MetricRow>> {
    jobs.iter()
        .enumerate()
        .map(|(i, (id, c, seed))| {
            Ok(MetricRow {
                identity_id: id.id,
                caption: *c,
                face_score: face_score(&images[i], &masks[i], id)?,
                text_match: text_match_score(&images[i], c, &masks[i])?,
                seed: *seed,
            })
        })
        .collect()
}

fn jobs_for(pairs: &[(IdentitySpec, Caption)], base: u64, k: usize) -> Vec<(IdentitySpec, Caption, u64)> {
    pairs
        .iter()
        .flat_map(|(id, c)| (0..k).map(move |j| (*id, *c, image_seed(base, id, c, j))))
        .collect()
}

fn prompts_for(jobs: &[(IdentitySpec, Caption, u64)]) -> Result<Vec<Prompt>> {
    jobs.iter()
        .map(|(id, c, seed)| Request::for_identity(id, *c, *seed).prompt())
        .collect()
}

/// `k` generated images per (identity, caption) pair, one metric row each.
pub fn evaluate(
    model: &Model<f32>,
    cfg: &RunConfig,
    pairs: &[(IdentitySpec, Caption)],
    k: usize,
) -> Result<Vec<MetricRow>> {
    Ok(evaluate_detailed(model, cfg, pairs, k)?.into_iter().map(|(r, _)| r).collect())
}

/// [`evaluate`] keeping every generated image and mask.
pub fn evaluate_detailed(
    model: &Model<f32>,
    cfg: &RunConfig,
    pairs: &[(IdentitySpec, Caption)],
    k: usize,
) -> Result<Vec<(MetricRow, Generated)>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let pipe = Pipeline::new(model, cfg)?;
    let jobs = jobs_for(pairs, cfg.seed, k);
    let out = pipe.generate(&prompts_for(&jobs)?)?;
    let images: Vec<ImageTensor> = out.iter().map(|g| g.image.clone()).collect();
    let masks: Vec<RegionMask> = out.iter().map(|g| g.mask.clone()).collect();
    Ok(score_rows(&images, &masks, &jobs)?.into_iter().zip(out).collect())
}

/// Metric rows for rendered samples scored against their own exact masks.
pub fn score_samples(samples: &[Sample]) -> Result<Vec<MetricRow>> {
    samples
        .iter()
        .map(|s| {
            Ok(MetricRow {
                identity_id: s.identity.id,
                caption: s.caption,
                face_score: face_score(&s.image, &s.face_mask, &s.identity)?,
                text_match: text_match_score(&s.image, &s.caption, &s.face_mask)?,
                seed: 0,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationRow {
    IeaOnly,
    TcaOnly,
    Independent,
    Blended,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [
        AblationRow::IeaOnly,
        AblationRow::TcaOnly,
        AblationRow::Independent,
        AblationRow::Blended,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::IeaOnly => "IEA",
            AblationRow::TcaOnly => "TCA",
            AblationRow::Independent => "IEA+TCA",
            AblationRow::Blended => "IEA+TCA+FFB",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    /// Per-image rows for each configuration, in [`AblationRow::ALL`] order.
    pub rows: Vec<(AblationRow, Vec<MetricRow>)>,
    /// Share of prompts whose independent and blended images differ.
    pub fusion_mode_differs: f64,
}

impl AblationResult {
    pub fn means(&self, row: AblationRow) -> (f64, f64) {
        self.rows
            .iter()
            .find(|(r, _)| *r == row)
            .map_or((0.0, 0.0), |(_, m)| metric_means(m))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "row,face_score,text_match,images")?;
        for (row, m) in &self.rows {
            let (f, t) = metric_means(m);
            writeln!(w, "{},{},{},{}", row.label(), f, t, m.len())?;
        }
        Ok(())
    }
}

/// The four configurations on shared initial noise and a shared phase-1
/// mask: IEA-only, TCA-only, independent fusion and blended fusion.
pub fn ablate(
    model: &Model<f32>,
    cfg: &RunConfig,
    pairs: &[(IdentitySpec, Caption)],
    k: usize,
) -> Result<AblationResult> {
    let mut rows: Vec<(AblationRow, Vec<MetricRow>)> = AblationRow::ALL.iter().map(|&r| (r, Vec::new())).collect();
    if pairs.is_empty() {
        return Ok(AblationResult {
            rows,
            fusion_mode_differs: 0.0,
        });
    }
    let pipe = Pipeline::new(model, cfg)?;
    let (a, b) = pipe.pathways()?;
    let jobs = jobs_for(pairs, cfg.seed, k);
    let prompts = prompts_for(&jobs)?;
    let (masks, tca_images) = pipe.generate_mask(&prompts)?;
    let mask_list: Vec<RegionMask> = masks.iter().map(|m| m.mask.clone()).collect();
    let stacked = stack_masks(&masks)?;
    let split = |x: Tensor<f32>| -> Result<Vec<ImageTensor>> { (0..prompts.len()).map(|i| x.batch_item(i)).collect() };
    let iea = split(pipe.sample(&prompts, &Route::Single(a.clone()), None)?)?;
    let dual = |mode| Route::Dual {
        a: a.clone(),
        b: b.clone(),
        mode,
    };
    let indep = split(pipe.sample(&prompts, &dual(FusionMode::Independent), Some(&stacked))?)?;
    let blend = split(pipe.sample(&prompts, &dual(FusionMode::Blended), Some(&stacked))?)?;
    let mut differs = 0usize;
    for (x, y) in indep.iter().zip(&blend) {
        if to_rgb8(x)? != to_rgb8(y)? {
            differs += 1;
        }
    }
    for (row, images) in [
        (AblationRow::IeaOnly, &iea),
        (AblationRow::TcaOnly, &tca_images),
        (AblationRow::Independent, &indep),
        (AblationRow::Blended, &blend),
    ] {
        let slot = rows.iter_mut().find(|(r, _)| *r == row).expect("row present");
        slot.1 = score_rows(images, &mask_list, &jobs)?;
    }
    Ok(AblationResult {
        rows,
        fusion_mode_differs: differs as f64 / prompts.len() as f64,
    })
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side has no variance.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return 0.0;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Mean metrics at each α for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub alpha: f64,
    pub face_score: f64,
    pub text_match: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSeed {
    pub seed: u64,
    pub points: Vec<SweepPoint>,
    pub rho_face: f64,
    pub rho_text: f64,
}

/// Vary the face-side pathway's α alone. Masks come from one phase-1 pass
/// per seed, shared across α values.
pub fn alpha_sweep(
    model: &Model<f32>,
    cfg: &RunConfig,
    pairs: &[(IdentitySpec, Caption)],
    alphas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepSeed>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = RunConfig { seed, ..cfg.clone() };
        let pipe = Pipeline::new(model, &cfg)?;
        let (a, _) = pipe.pathways()?;
        let jobs = jobs_for(pairs, seed, 1);
        let prompts = prompts_for(&jobs)?;
        let (masks, _) = pipe.generate_mask(&prompts)?;
        let mask_list: Vec<RegionMask> = masks.iter().map(|m| m.mask.clone()).collect();
        let mut points = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            let route = Route::Single(PathwaySpec::new(a.adapter.clone(), alpha));
            let x = pipe.sample(&prompts, &route, None)?;
            let images = (0..prompts.len()).map(|i| x.batch_item(i)).collect::<Result<Vec<_>>>()?;
            let (face, text) = metric_means(&score_rows(&images, &mask_list, &jobs)?);
            points.push(SweepPoint {
                alpha,
                face_score: face,
                text_match: text,
            });
        }
        let al: Vec<f64> = points.iter().map(|p| p.alpha).collect();
        let rho_face = spearman(&al, &points.iter().map(|p| p.face_score).collect::<Vec<_>>());
        let rho_text = spearman(&al, &points.iter().map(|p| p.text_match).collect::<Vec<_>>());
        out.push(SweepSeed {
            seed,
            points,
            rho_face,
            rho_text,
        });
    }
    Ok(out)
}
