//! Hot kernels under a single-thread rayon pool and under the default pool.
//! Building with `--no-default-features` runs the sequential fallback
//! instead; both paths produce bitwise identical results.

use criterion::{criterion_group, criterion_main, Criterion};
use longreg_core::diffeo::exp_flow;
use longreg_core::objective::{Params, SimilarityConfig, StageProblem, StageSettings, Weights};
use longreg_core::similarity::{silncc, SILNCC_EPS_REL};
use longreg_core::synth::{phantom, smooth_sigma_vox};
use longreg_core::{GridSpec, VectorField};
use rayon::ThreadPool;

fn pools() -> Vec<(String, ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    let n = all.current_num_threads();
    vec![("1 thread".into(), one), (format!("{n} threads"), all)]
}

fn wavy_flow(g: GridSpec, max: f64) -> VectorField {
    let f = VectorField::from_fn(g, |[i, j, k]| {
        let (x, y, z) = (i as f64, j as f64, k as f64);
        [(0.3 * y).sin(), (0.2 * z + 0.1 * x).cos(), (0.25 * x).sin()]
    });
    let f = smooth_sigma_vox(&f, 1.0);
    f.scaled(max / f.max_norm())
}

fn kernels(c: &mut Criterion) {
    let g = GridSpec::unit([48, 48, 48]);
    let a = phantom(g, 1).unwrap();
    let b = a.map(|x| 0.9 * x + 0.1);
    let flow = wavy_flow(g, 2.0);

    let sg = GridSpec::unit([24, 24, 24]);
    let images: Vec<_> = (0..4).map(|s| phantom(sg, s).unwrap()).collect();
    let flow_grid = sg.coarsened(2).unwrap();
    let settings = StageSettings {
        similarity: SimilarityConfig {
            window_radius: 1,
            eps_rel: SILNCC_EPS_REL,
        },
        weights: Weights {
            alpha_ss: 1.0,
            alpha_l2: 0.01,
            alpha_ts: 1.0,
        },
        smooth_sigma_vox: 1.0,
        rigid: true,
        exp_steps: None,
    };
    let problem = StageProblem::new(images, vec![0.0, 1.0, 2.0, 3.0], flow_grid, &settings).unwrap();
    let mut params = Params::zeros(flow_grid, 4);
    for f in params.flows.iter_mut() {
        *f = wavy_flow(flow_grid, 0.5);
    }

    for (name, pool) in pools() {
        let mut group = c.benchmark_group(name);
        group.sample_size(10);
        group.bench_function("silncc 48^3", |bch| {
            bch.iter(|| pool.install(|| silncc(&a, &b, 1, SILNCC_EPS_REL * a.variance()).unwrap()))
        });
        group.bench_function("exp 48^3", |bch| bch.iter(|| pool.install(|| exp_flow(&flow, 6).unwrap())));
        group.bench_function("loss+grad 24^3 N=4", |bch| {
            bch.iter(|| pool.install(|| problem.loss_and_grad(&params).unwrap()))
        });
        group.finish();
    }
}

criterion_group!(benches, kernels);
criterion_main!(benches);
