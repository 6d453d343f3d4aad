//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails.
//!
//! The trained toy model used by the trend criteria is cached under the
//! cargo target dir, keyed by the run config and the core sources, so only
//! the first run pays for training. `DPA_RETRAIN=1` forces a fresh run.
//! Criterion numbers given as arguments (`cargo test --test acceptance -- 1 5`)
//! restrict the run to those criteria.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpa_core::adapters::stack_embeddings;
use dpa_core::backbone::{merged_attention, AttnRecord, Conditioning, ImagePrompt, KeyValue, Taps};
use dpa_core::checkpoint;
use dpa_core::config::{MaskMethod, RunConfig};
use dpa_core::fusion::{dual_path_forward, DualPathOptions, FusionMode, PathwaySpec};
use dpa_core::image::{encode_png_mask, encode_png_rgb};
use dpa_core::losses::eager::{fuse_noise, loss_iea, loss_tca};
use dpa_core::mask::{largest_region, mask_from_heatmap, otsu_bin, Connectivity, HeatmapAccumulator, MaskConfig, OTSU_BINS};
use dpa_core::model::Model;
use dpa_core::nn::{Binder, ParamStore};
use dpa_core::pipeline::{self, AblationRow, Request};
use dpa_core::toy::{make_dataset, Caption, IdentitySpec};
use dpa_core::training::{grad_check, tiny_check_setup, TrainConfig};
use dpa_core::{Graph, Tensor};

type Outcome = Result<(bool, String), String>;

const BASE_BUDGET_S: f64 = 15.0 * 60.0;
const ADAPTER_BUDGET_S: f64 = 15.0 * 60.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SWEEP_ALPHAS: [f64; 4] = [1.0, 0.7, 0.4, 0.1];

const SOURCES: &[&str] = &[
    include_str!("../src/adapters.rs"),
    include_str!("../src/backbone.rs"),
    include_str!("../src/config.rs"),
    include_str!("../src/fusion.rs"),
    include_str!("../src/graph.rs"),
    include_str!("../src/losses.rs"),
    include_str!("../src/nn.rs"),
    include_str!("../src/schedule.rs"),
    include_str!("../src/tensor.rs"),
    include_str!("../src/toy.rs"),
    include_str!("../src/training.rs"),
];

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-2.0..2.0))
}

fn rand_mask(rng: &mut ChaCha8Rng, shape: &[usize], binary: bool) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if binary { rng.gen_bool(0.5) as u8 as f64 } else { rng.gen() })
}

/// Reference MSE with an explicit loop and channel broadcast of the mask.
fn oracle_masked_mse(noise: &Tensor<f64>, pred: &Tensor<f64>, mask: Option<&Tensor<f64>>) -> f64 {
    let s = noise.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut acc = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = ((bi * c + ci) * h + y) * w + x;
                    let m = mask.map_or(1.0, |m| m.data()[(bi * h + y) * w + x]);
                    let d = m * (noise.data()[i] - pred.data()[i]);
                    acc += d * d;
                }
            }
        }
    }
    acc / noise.numel() as f64
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..100 {
        let shape = [rng.gen_range(1..4), 3, rng.gen_range(2..10), rng.gen_range(2..10)];
        let mshape = [shape[0], 1, shape[2], shape[3]];
        let n = rand_tensor(&mut rng, &shape);
        let p = rand_tensor(&mut rng, &shape);
        let mse = oracle_masked_mse(&n, &p, None);
        let ones = Tensor::ones(mshape);
        let zeros = Tensor::zeros(mshape);
        let m = rand_mask(&mut rng, &mshape, true);
        let checks = [
            loss_iea(&n, &p, &ones).map_err(err)? - mse,
            loss_iea(&n, &p, &zeros).map_err(err)?,
            loss_iea(&n, &p, &m).map_err(err)? + loss_tca(&n, &p, &m).map_err(err)? - mse,
            loss_iea(&n, &p, &m).map_err(err)? - oracle_masked_mse(&n, &p, Some(&m)),
        ];
        worst = checks.iter().fold(worst, |a, d| a.max(d.abs()));
    }
    Ok((worst <= 1e-6, format!("100 cases, max deviation {worst:.2e} (tol 1e-6)")))
}

fn perturbed_model(cfg: &RunConfig, seed: u64) -> Result<Model<f32>, String> {
    let mut m = Model::init_base(cfg.backbone_config(), cfg.adapter_config(), seed).map_err(err)?;
    m.init_adapters(seed).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = m.params.names().filter(|n| !n.starts_with("base.")).map(String::from).collect();
    for n in names {
        let mut t = (**m.params.get(&n).map_err(err)?).clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2f32..0.2));
        m.params.insert(n, t);
    }
    Ok(m)
}

fn criterion_2() -> Outcome {
    let cfg = RunConfig::preset("smoke").map_err(err)?;
    let model = perturbed_model(&cfg, 2)?;
    let bb = &model.backbone;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = cfg.image_size;
    let mut failures = Vec::new();
    for case in 0..100 {
        let bsz = rng.gen_range(1..3);
        let x = Tensor::<f32>::from_fn([bsz, 3, n, n], |_| rng.gen_range(-1.0..1.0));
        let t: Vec<usize> = (0..bsz).map(|_| rng.gen_range(0..1000)).collect();
        let captions = Caption::all();
        let tokens: Vec<Vec<usize>> = (0..bsz).map(|_| captions[rng.gen_range(0..24)].tokens().to_vec()).collect();
        let faces: Vec<_> = (0..bsz)
            .map(|_| [(); 48].map(|_| rng.gen_range(-1.0f32..1.0)))
            .collect();
        let a = PathwaySpec::new("iea", rng.gen_range(0.1..1.5));
        let b = PathwaySpec::new("tca", rng.gen_range(0.1..1.5));
        let arbitrary = Tensor::<f32>::from_fn([bsz, 1, n, n], |_| rng.gen_bool(0.5) as u8 as f32);

        let g = Graph::inference();
        let binder = Binder::frozen(&g, &model.params);
        let xv = g.constant(x);
        let text = bb.embed_text(&binder, &tokens).map_err(err)?;
        let face = g.constant(stack_embeddings::<f32>(&faces));
        let single = |p: &PathwaySpec| -> Result<Tensor<f32>, String> {
            let tok = dpa_core::adapters::project_embedding(&binder, &face, &p.adapter, model.adapter.n_tokens, model.adapter.token_dim)
                .map_err(err)?;
            let cond = Conditioning {
                text,
                image: Some(ImagePrompt {
                    tokens: tok,
                    adapter: &p.adapter,
                    alpha: p.alpha,
                }),
            };
            Ok((*bb.forward(&binder, &xv, &t, cond, Taps::NONE).map_err(err)?.eps.value()).clone())
        };
        let dual = |pa: &PathwaySpec, pb: &PathwaySpec, m: &Tensor<f32>| -> Result<Tensor<f32>, String> {
            let opts = DualPathOptions {
                mode: FusionMode::Blended,
                ..Default::default()
            };
            let out = dual_path_forward(bb, &binder, &model.adapter, &xv, &t, &text, &face, pa, pb, &g.constant(m.clone()), opts)
                .map_err(err)?;
            let v = (*out.eps_fused.value()).clone();
            Ok(v)
        };
        let (ea, eb) = (single(&a)?, single(&b)?);
        if dual(&a, &b, &Tensor::ones([bsz, 1, n, n]))? != ea {
            failures.push(format!("case {case}: m=1"));
        }
        if dual(&a, &b, &Tensor::zeros([bsz, 1, n, n]))? != eb {
            failures.push(format!("case {case}: m=0"));
        }
        if dual(&a, &a, &arbitrary)? != ea {
            failures.push(format!("case {case}: identical pathways"));
        }
        if fuse_noise(&ea, &eb, &Tensor::ones([bsz, 1, n, n])).map_err(err)? != ea
            || fuse_noise(&ea, &eb, &Tensor::zeros([bsz, 1, n, n])).map_err(err)? != eb
        {
            failures.push(format!("case {case}: fuse_noise"));
        }
    }
    let detail = if failures.is_empty() {
        "100 cases bitwise equal (fuse_noise m=1/m=0; blended m=1, m=0, identical pathways)".to_string()
    } else {
        format!("{} mismatches, first: {}", failures.len(), failures[0])
    };
    Ok((failures.is_empty(), detail))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bitwise = true;
    let mut worst = 0f64;
    for _ in 0..100 {
        let (b, nq, lt, li) = (rng.gen_range(1..3), rng.gen_range(1..20), rng.gen_range(1..6), rng.gen_range(1..6));
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let width = heads * rng.gen_range(1..5);
        let g = Graph::<f64>::inference();
        let mut var = |shape: [usize; 3]| g.constant(rand_tensor(&mut rng, &shape));
        let q = var([b, nq, width]);
        let text = KeyValue {
            keys: var([b, lt, width]),
            values: var([b, lt, width]),
        };
        let image = KeyValue {
            keys: var([b, li, width]),
            values: var([b, li, width]),
        };
        let out = |img: Option<&KeyValue<'_, f64>>, alpha: f64| -> Result<Tensor<f64>, String> {
            Ok((*merged_attention(&q, &text, img, alpha, heads).map_err(err)?.output.value()).clone())
        };
        let text_only = out(None, 1.0)?;
        let zero = out(Some(&image), 0.0)?;
        bitwise &= zero == text_only;
        let one = out(Some(&image), 1.0)?;
        let alpha = rng.gen_range(-2.0..2.0);
        let at = out(Some(&image), alpha)?;
        for ((z, o), a) in zero.data().iter().zip(one.data()).zip(at.data()) {
            worst = worst.max(((a - z) - alpha * (o - z)).abs());
        }
    }
    Ok((
        bitwise && worst <= 1e-6,
        format!("α=0 text-only bitwise: {bitwise}; linearity max deviation {worst:.2e} (tol 1e-6), 100 cases"),
    ))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let (model, input) = tiny_check_setup(4).map_err(err)?;
    let report = grad_check(&model, &input, &TrainConfig::default(), 24, 1e-6, 4).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let n = report.checks.len();
    Ok((
        n >= 20 && report.max_rel_err < 1e-3 && secs < 60.0,
        format!("{n} parameters, max relative error {:.2e} (< 1e-3), f64, {secs:.1} s", report.max_rel_err),
    ))
}

/// Flood fill from each unvisited on-pixel in raster order; the first
/// strictly largest component wins.
fn oracle_largest(bits: &[bool], h: usize, w: usize, eight: bool) -> Vec<bool> {
    let mut label = vec![usize::MAX; bits.len()];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    for start in 0..bits.len() {
        if !bits[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if bits[j] && label[j] == usize::MAX {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    match best {
        Some((keep, _)) => label.iter().map(|&l| l == keep).collect(),
        None => vec![false; bits.len()],
    }
}

/// Between-class variance in floating point for every candidate threshold
/// bin; the first maximum wins.
fn oracle_otsu(values: &[f64]) -> Option<usize> {
    let bins: Vec<usize> = values.iter().map(|&v| ((v * 256.0).floor().max(0.0) as usize).min(255)).collect();
    let mut best: Option<(usize, f64)> = None;
    for k in 0..OTSU_BINS {
        let (fg, bg): (Vec<f64>, Vec<f64>) = {
            let fg: Vec<f64> = bins.iter().filter(|&&b| b >= k).map(|&b| b as f64).collect();
            let bg: Vec<f64> = bins.iter().filter(|&&b| b < k).map(|&b| b as f64).collect();
            (fg, bg)
        };
        if fg.is_empty() || bg.is_empty() {
            continue;
        }
        let n = bins.len() as f64;
        let (w0, w1) = (bg.len() as f64 / n, fg.len() as f64 / n);
        let (m0, m1) = (bg.iter().sum::<f64>() / bg.len() as f64, fg.iter().sum::<f64>() / fg.len() as f64);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(_, bv)| var > bv * (1.0 + 1e-12)) {
            best = Some((k, var));
        }
    }
    best.map(|(k, _)| k)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..200 {
        let density = rng.gen_range(0.2..0.8);
        let bits: Vec<bool> = (0..256).map(|_| rng.gen_bool(density)).collect();
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            if largest_region(&bits, 16, 16, conn).map_err(err)? != oracle_largest(&bits, 16, 16, eight) {
                mismatches += 1;
            }
        }
    }
    let mut otsu_bad = 0;
    for case in 0..200 {
        let values: Vec<f64> = (0..256)
            .map(|_| {
                let v: f64 = rng.gen();
                if case % 2 == 0 { v * v } else { v }
            })
            .collect();
        if otsu_bin(&values) != oracle_otsu(&values) {
            otsu_bad += 1;
        }
    }
    Ok((
        mismatches == 0 && otsu_bad == 0,
        format!(
            "largest_region: {mismatches}/400 mismatches vs flood fill; Otsu: {otsu_bad}/200 bin mismatches vs exhaustive search"
        ),
    ))
}

fn criterion_6() -> Outcome {
    let size = 32;
    let block = |y: usize, x: usize| (8..16).contains(&y) && (12..20).contains(&x);
    let mut acc = HeatmapAccumulator::new(size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (res, heads) in [(32usize, 2usize), (16, 2)] {
        let scale = size / res;
        let keys = 1 + 4;
        let image = Tensor::<f32>::from_fn([1, heads, res * res, keys], |i| {
            let k = i % keys;
            let q = (i / keys) % (res * res);
            let (y, x) = (q / res * scale, q % res * scale);
            let on = block(y, x);
            let noise = rng.gen_range(0.0..0.02);
            match (k, on) {
                (0, true) => 0.1,
                (0, false) => 0.9,
                (_, true) => 0.225,
                (_, false) => 0.025 - noise,
            }
        });
        let record = AttnRecord {
            layer: format!("synthetic{res}"),
            height: res,
            width: res,
            text: Tensor::zeros([1, heads, res * res, 3]),
            image: Some(image),
            null_key: true,
        };
        acc.add(&record, 0).map_err(err)?;
    }
    let cfg = RunConfig {
        mask_method: MaskMethod::Otsu,
        ..RunConfig::default()
    };
    let mut failures = Vec::new();
    for (name, mc) in [
        ("otsu/4", cfg.mask_config()),
        ("otsu/8", MaskConfig { connectivity: Connectivity::Eight, ..cfg.mask_config() }),
    ] {
        let r = mask_from_heatmap(acc.finish().map_err(err)?, &mc).map_err(err)?;
        let exact = (0..size * size).all(|i| (r.mask.data()[i] == 1.0) == block(i / size, i % size));
        if !exact || r.fallback_box {
            failures.push(name);
        }
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            "8x8 injected block recovered exactly (two layers, 32x32 and 16x16; 4- and 8-connectivity)".into()
        } else {
            format!("mask differs from the injected block for {failures:?}")
        },
    ))
}

fn fnv(parts: &[&str]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in parts {
        for &b in p.as_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        h = (h ^ 0xff).wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Trained {
    model: Model<f32>,
    base_seconds: f64,
    adapter_seconds: f64,
    cached: bool,
    loss_trend: String,
}

fn train_or_load(cfg: &RunConfig) -> Result<Trained, String> {
    let json = cfg.to_json().map_err(err)?;
    let mut parts = vec![json.as_str()];
    parts.extend_from_slice(SOURCES);
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let stem = format!("toy-{:016x}", fnv(&parts));
    let (ck, meta) = (dir.join(format!("{stem}.dpckpt")), dir.join(format!("{stem}.json")));
    let retrain = std::env::var("DPA_RETRAIN").is_ok_and(|v| v == "1");
    if !retrain && ck.exists() && meta.exists() {
        let params: ParamStore<f32> = checkpoint::load(&ck).map_err(err)?;
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&meta).map_err(err)?).map_err(err)?;
        return Ok(Trained {
            model: Model::with_params(cfg.backbone_config(), cfg.adapter_config(), params).map_err(err)?,
            base_seconds: m["base_seconds"].as_f64().unwrap_or(f64::NAN),
            adapter_seconds: m["adapter_seconds"].as_f64().unwrap_or(f64::NAN),
            cached: true,
            loss_trend: m["loss_trend"].as_str().unwrap_or_default().to_string(),
        });
    }
    println!("       training the toy model ({} + {} steps); later runs reuse it", cfg.base_steps, cfg.adapter_steps);
    let data = make_dataset(cfg.identities, cfg.per_identity, cfg.seed);
    let schedule = cfg.schedule().map_err(err)?;
    let mut model = Model::init_base(cfg.backbone_config(), cfg.adapter_config(), cfg.seed).map_err(err)?;
    let t = Instant::now();
    let base_log =
        dpa_core::training::train_base(&mut model, &data, &schedule, &cfg.base_train_config(), |_| {}).map_err(err)?;
    let base_seconds = t.elapsed().as_secs_f64();
    model.init_adapters(cfg.seed).map_err(err)?;
    let t = Instant::now();
    let ad_log = dpa_core::training::train_adapters(&mut model, &data, &schedule, &cfg.adapter_train_config(), |_| {})
        .map_err(err)?;
    let adapter_seconds = t.elapsed().as_secs_f64();
    let (bh, bt) = base_log.head_tail_means(100).unwrap_or_default();
    let (ah, at) = ad_log.head_tail_means(100).unwrap_or_default();
    let loss_trend = format!("base loss {bh:.4}→{bt:.4}, adapter loss {ah:.4}→{at:.4}");
    std::fs::create_dir_all(&dir).map_err(err)?;
    checkpoint::save(&ck, &model.params).map_err(err)?;
    let m = serde_json::json!({
        "base_seconds": base_seconds,
        "adapter_seconds": adapter_seconds,
        "loss_trend": loss_trend,
    });
    std::fs::write(&meta, m.to_string()).map_err(err)?;
    Ok(Trained {
        model,
        base_seconds,
        adapter_seconds,
        cached: false,
        loss_trend,
    })
}

fn criterion_7(model: &Model<f32>, cfg: &RunConfig) -> Outcome {
    let id = IdentitySpec::generate(cfg.seed, 3);
    let req = [Request::for_identity(&id, Caption::evaluation_set()[4], 77)];
    let run = || -> Result<(Vec<u8>, Vec<u8>), String> {
        let (g, _) = pipeline::generate(model, cfg, &req).map_err(err)?.remove(0);
        Ok((encode_png_rgb(&g.image).map_err(err)?, encode_png_mask(&g.mask).map_err(err)?))
    };
    let (a, b) = (run()?, run()?);
    Ok((
        a == b,
        format!("two full generate runs: image PNG {} bytes, mask PNG {} bytes, identical: {}", a.0.len(), a.1.len(), a == b),
    ))
}

/// One evaluation caption per identity, cycling through the 12.
fn spread_pairs(ids: &[IdentitySpec]) -> Vec<(IdentitySpec, Caption)> {
    let caps = Caption::evaluation_set();
    ids.iter().enumerate().map(|(i, id)| (*id, caps[i % caps.len()])).collect()
}

fn criterion_8(t: &Trained, cfg: &RunConfig) -> Outcome {
    let ids: Vec<IdentitySpec> = (0..cfg.identities as u32).map(|i| IdentitySpec::generate(cfg.seed, i)).collect();
    let pairs = spread_pairs(&ids);
    let mut per_seed = Vec::new();
    let mut differs = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let c = RunConfig { seed, ..cfg.clone() };
        let r = pipeline::ablate(&t.model, &c, &pairs, 1).map_err(err)?;
        differs.push(r.fusion_mode_differs);
        per_seed.push(AblationRow::ALL.map(|row| r.means(row)));
    }
    let med = |row: usize, face: bool| {
        let v: Vec<f64> = per_seed.iter().map(|s| if face { s[row].0 } else { s[row].1 }).collect();
        pipeline::median(&v)
    };
    let (iea, tca, ind, ffb) = (0, 1, 2, 3);
    let margins = [
        ("face(IEA)-face(TCA)", med(iea, true) - med(tca, true)),
        ("text(TCA)-text(IEA)", med(tca, false) - med(iea, false)),
        ("face(FFB)-face(IEA+TCA)", med(ffb, true) - med(ind, true)),
        ("text(FFB)-text(IEA+TCA)", med(ffb, false) - med(ind, false)),
    ];
    let budget = t.base_seconds <= BASE_BUDGET_S && t.adapter_seconds <= ADAPTER_BUDGET_S;
    let pass = budget && margins.iter().all(|(_, m)| *m > 0.0);
    let mut detail = format!(
        "training {:.0} s + {:.0} s{} ({}); medians over seeds {:?}, {} prompts each:",
        t.base_seconds,
        t.adapter_seconds,
        if t.cached { " (cached)" } else { "" },
        t.loss_trend,
        ABLATION_SEEDS,
        pairs.len()
    );
    for (i, row) in AblationRow::ALL.iter().enumerate() {
        detail.push_str(&format!(" {} face {:.4} text {:.4};", row.label(), med(i, true), med(i, false)));
    }
    for (name, m) in margins {
        detail.push_str(&format!(" {name} = {m:+.4};"));
    }
    detail.push_str(&format!(" fusion modes differ on {:.0}% of prompts", 100.0 * pipeline::median(&differs)));
    Ok((pass, detail))
}

fn criterion_9(t: &Trained, cfg: &RunConfig) -> Outcome {
    let ids: Vec<IdentitySpec> = (0..12).map(|i| IdentitySpec::generate(cfg.seed, i)).collect();
    let pairs = spread_pairs(&ids);
    let sweep = pipeline::alpha_sweep(&t.model, cfg, &pairs, &SWEEP_ALPHAS, &SWEEP_SEEDS).map_err(err)?;
    let rf: Vec<f64> = sweep.iter().map(|s| s.rho_face).collect();
    let rt: Vec<f64> = sweep.iter().map(|s| s.rho_text).collect();
    let (mf, mt) = (pipeline::median(&rf), pipeline::median(&rt));
    let mut detail = format!("median rho(alpha, face) {mf:+.3} (> 0), median rho(alpha, text) {mt:+.3} (<= 0); per seed:");
    for s in &sweep {
        let pts: Vec<String> =
            s.points.iter().map(|p| format!("{}:{:.3}/{:.3}", p.alpha, p.face_score, p.text_match)).collect();
        detail.push_str(&format!(" [{}]", pts.join(" ")));
    }
    Ok((mf > 0.0 && mt <= 0.0, detail))
}

fn random_config(rng: &mut ChaCha8Rng) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = rng.gen();
    c.beta_start = rng.gen_range(1e-5..1e-3);
    c.beta_end = rng.gen_range(0.01..0.05);
    c.ddim_steps = rng.gen_range(1..200);
    c.eta = rng.gen_range(0.0..1.0);
    c.guidance_scale = rng.gen_range(0.0..10.0);
    c.cfg_per_pathway = rng.gen();
    c.alpha_iea = rng.gen_range(0.0..2.0);
    c.alpha_tca = rng.gen_range(0.0..2.0);
    c.fusion_mode = if rng.gen() { FusionMode::Blended } else { FusionMode::Independent };
    c.training_free = rng.gen();
    c.alpha_weak = rng.gen_range(0.0..0.5);
    c.alpha_strong = rng.gen_range(0.6..1.5);
    c.private_streams = rng.gen();
    c.mask_method = if rng.gen() { MaskMethod::Otsu } else { MaskMethod::Fixed };
    c.mask_tau = rng.gen_range(0.01..1.0);
    c.mask_connectivity = if rng.gen() { 4 } else { 8 };
    c.record_steps = rng.gen_bool(0.5).then(|| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..c.ddim_steps)).collect());
    c.record_layers = rng.gen_bool(0.5).then(|| c.backbone_config().attention_layers()[..1].to_vec());
    c.lr = rng.gen_range(1e-6..1e-2);
    c.adapter_lr = rng.gen_range(1e-6..1e-2);
    c.ema_decay = if rng.gen() { 0.0 } else { rng.gen_range(0.9..0.9999) };
    c.text_dropout = rng.gen();
    c.w_fusion = rng.gen_range(0.0..3.0);
    c.base_steps = rng.gen_range(1..10_000);
    c.dataset_path = rng.gen_bool(0.5).then(|| format!("data/run{}.dptoy", rng.gen::<u16>()));
    c
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad_cfg = 0;
    let mut bad_ck = 0;
    for i in 0..50 {
        let c = random_config(&mut rng);
        let json = c.to_json().map_err(err)?;
        match RunConfig::from_json(&json) {
            Ok(back) if back == c && back.to_json().map_err(err)? == json => {}
            _ => bad_cfg += 1,
        }
        let mut p = ParamStore::<f32>::new();
        for j in 0..rng.gen_range(1..8) {
            let rank = rng.gen_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..6)).collect();
            let group = ["base", "iea", "tca"][j % 3];
            p.insert(format!("{group}.w{i}_{j}"), Tensor::from_fn(shape, |_| f32::from_bits(rng.gen())));
        }
        let bytes = checkpoint::encode(&p).map_err(err)?;
        let again = checkpoint::encode(&checkpoint::decode(&bytes).map_err(err)?).map_err(err)?;
        if again != bytes {
            bad_ck += 1;
        }
    }
    Ok((
        bad_cfg == 0 && bad_ck == 0,
        format!("config JSON: {bad_cfg}/50 failures; DPCKPT: {bad_ck}/50 failures (byte-exact)"),
    ))
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut all_pass = true;
    let mut report = |n: u32, name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        all_pass &= pass;
        println!("{} [{n:>2}] {name} ({secs:.1} s): {detail}", if pass { "PASS" } else { "FAIL" });
    };
    let quick: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "loss identities", criterion_1),
        (2, "fusion identities", criterion_2),
        (3, "alpha mechanics", criterion_3),
        (4, "gradient check", criterion_4),
        (5, "mask pipeline oracle", criterion_5),
        (6, "synthetic mask recovery", criterion_6),
        (10, "round trips", criterion_10),
    ];
    for (n, name, f) in quick {
        if want(n) {
            let t = Instant::now();
            report(n, name, t, f());
        }
    }

    if [7, 8, 9].into_iter().any(want) {
        let cfg = RunConfig::default();
        let t = Instant::now();
        match train_or_load(&cfg) {
            Ok(trained) => {
                if want(7) {
                    let t = Instant::now();
                    report(7, "determinism", t, criterion_7(&trained.model, &cfg));
                }
                if want(8) {
                    let t = Instant::now();
                    report(8, "ablation trends", t, criterion_8(&trained, &cfg));
                }
                if want(9) {
                    let t = Instant::now();
                    report(9, "alpha-sweep direction", t, criterion_9(&trained, &cfg));
                }
            }
            Err(e) => {
                for (n, name) in [(7, "determinism"), (8, "ablation trends"), (9, "alpha-sweep direction")] {
                    if want(n) {
                        report(n, name, t, Err(format!("training failed: {e}")));
                    }
                }
            }
        }
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
