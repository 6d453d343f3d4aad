use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpa_core::backbone::{Conditioning, Taps};
use dpa_core::config::RunConfig;
use dpa_core::mask::{largest_region, mask_from_heatmap, Connectivity, Heatmap, MaskConfig};
use dpa_core::model::Model;
use dpa_core::nn::Binder;
use dpa_core::pipeline::{Pipeline, Request, Route};
use dpa_core::toy::{make_dataset, Caption, IdentitySpec};
use dpa_core::training::{train_adapters, TrainConfig};
use dpa_core::{Graph, Tensor};

fn random(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let x = random([4, 32, 32, 32], 0);
    let w = random([32, 32, 3, 3], 1);
    c.bench_function("conv3x3 4x32x32x32 forward+backward", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let xv = g.leaf(x.clone().into(), true);
            let wv = g.leaf(w.clone().into(), true);
            let y = xv.conv2d(&wv, None).unwrap().sum_all();
            black_box(g.backward(&y).unwrap());
        })
    });
}

fn backbone(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mut model = Model::<f32>::init_base(cfg.backbone_config(), cfg.adapter_config(), 0).unwrap();
    model.init_adapters(0).unwrap();
    let x = random([4, 3, 32, 32], 2);
    let tokens = vec![Caption::all()[0].tokens().to_vec(); 4];
    c.bench_function("backbone forward batch 4", |bench| {
        bench.iter(|| {
            let g = Graph::inference();
            let b = Binder::frozen(&g, &model.params);
            let text = model.backbone.embed_text(&b, &tokens).unwrap();
            let out = model
                .backbone
                .forward(&b, &g.constant(x.clone()), &[500; 4], Conditioning { text, image: None }, Taps::NONE)
                .unwrap();
            black_box(out.eps.value());
        })
    });
}

fn adapter_step(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mut model = Model::<f32>::init_base(cfg.backbone_config(), cfg.adapter_config(), 0).unwrap();
    model.init_adapters(0).unwrap();
    let data = make_dataset(4, 4, 0);
    let schedule = cfg.schedule().unwrap();
    let tc = TrainConfig {
        steps: 1,
        ..cfg.adapter_train_config()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("adapter step batch 4", |bench| {
        bench.iter(|| black_box(train_adapters(&mut model, &data, &schedule, &tc, |_| {}).unwrap()))
    });
    group.finish();
}

fn generation(c: &mut Criterion) {
    let cfg = RunConfig {
        ddim_steps: 10,
        ..RunConfig::default()
    };
    let mut model = Model::<f32>::init_base(cfg.backbone_config(), cfg.adapter_config(), 0).unwrap();
    model.init_adapters(0).unwrap();
    let id = IdentitySpec::generate(0, 0);
    let prompts: Vec<_> = (0..4)
        .map(|i| Request::for_identity(&id, Caption::all()[i], i as u64).prompt().unwrap())
        .collect();
    let pipe = Pipeline::new(&model, &cfg).unwrap();
    let (a, _) = pipe.pathways().unwrap();
    let mut group = c.benchmark_group("sampling");
    group.sample_size(10);
    group.bench_function("10-step single-path DDIM with CFG, 4 prompts", |bench| {
        bench.iter(|| black_box(pipe.sample(&prompts, &Route::Single(a.clone()), None).unwrap()))
    });
    group.finish();
}

fn mask(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let values: Vec<f64> = (0..32 * 32).map(|_| rng.gen()).collect();
    let heat = Heatmap {
        height: 32,
        width: 32,
        values,
    };
    let cfg = MaskConfig::default();
    c.bench_function("mask_from_heatmap 32x32", |bench| {
        bench.iter_batched(|| heat.clone(), |h| black_box(mask_from_heatmap(h, &cfg).unwrap()), BatchSize::SmallInput)
    });
    let bits: Vec<bool> = (0..64 * 64).map(|_| rng.gen_bool(0.55)).collect();
    c.bench_function("largest_region 64x64 8-conn", |bench| {
        bench.iter(|| black_box(largest_region(&bits, 64, 64, Connectivity::Eight).unwrap()))
    });
}

criterion_group!(benches, conv, backbone, adapter_step, generation, mask);
criterion_main!(benches);
