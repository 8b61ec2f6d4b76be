//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the report prints in order.
//! `cargo test --test acceptance -- 2 5` runs only criteria 2 and 5.
//! The full cross-domain experiment (criterion 8) trains six models at
//! full scale; it runs when named explicitly or with
//! `S2CP_ACCEPTANCE_FULL=1`, and is reported as skipped otherwise.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2cp_cli::{commands, RunConfig};
use s2cp_core::image::GrayImage;
use s2cp_core::metrics::{
    default_thresholds, match_targets, pixel_counts, roc_sweep, BinaryMask, MatchRule, DEFAULT_MATCH_RADIUS,
};
use s2cp_core::network::{Attention, Mode, ModelConfig, Oam};
use s2cp_core::spectral::{Prm, PrmInit};
use s2cp_core::style::{
    activation_mask, attribution, gaussian_kl, selected_count, ChannelStats, Ranking, SsrConfig, SsrSite,
    StylePrototype,
};
use s2cp_core::tensor::gradcheck::{central_difference, relative_error, FD_STEP};
use s2cp_core::tensor::{soft_iou_loss, Checkpoint, Init, ParamStore, Tensor, Upsample, Var};
use s2cp_core::{Graph64, Model64, Tensor64};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-3;
/// Gradients below this magnitude are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-6;

/// Checks `d/d inputs sum(out * R)` against central differences at up to
/// `per_input` random coordinates of every input. Returns the worst
/// relative error and the number of coordinates checked.
fn check_op(
    inputs: &[Tensor64],
    per_input: usize,
    rng: &mut ChaCha8Rng,
    build: &dyn Fn(&mut Graph64, &[Var]) -> Vec<Var>,
) -> (f64, usize) {
    let forward = |vals: &[Tensor64], weights: Option<&[Tensor64]>| -> (Graph64, Vec<Var>, Vec<Var>) {
        let mut g = Graph64::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
        let outs = build(&mut g, &vars);
        let _ = weights;
        (g, vars, outs)
    };
    let (g0, _, outs0) = forward(inputs, None);
    let weights: Vec<Tensor64> = outs0
        .iter()
        .map(|&o| Tensor::uniform(g0.shape(o), -1.0, 1.0, rng))
        .collect();
    let loss_of = |vals: &[Tensor64]| -> f64 {
        let (g, _, outs) = forward(vals, None);
        outs.iter()
            .zip(&weights)
            .map(|(&o, w)| g.value(o).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let (mut g, vars, outs) = forward(inputs, None);
    let mut total = None;
    for (&o, w) in outs.iter().zip(&weights) {
        let wv = g.constant(w.clone()).unwrap();
        let p = g.mul(o, wv).unwrap();
        let s = g.sum_all(p).unwrap();
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s).unwrap(),
        });
    }
    g.backward(total.unwrap()).unwrap();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let n = inputs[k].len();
        for _ in 0..per_input.min(n) {
            let i = rng.random_range(0..n);
            let flat: Vec<f64> = inputs[k].data().to_vec();
            let numeric = central_difference(
                |x| {
                    let mut vals = inputs.to_vec();
                    vals[k] = Tensor::from_vec(inputs[k].shape(), x.to_vec()).unwrap();
                    loss_of(&vals)
                },
                &flat,
                i,
                FD_STEP,
            );
            worst = worst.max(relative_error(analytic.data()[i], numeric, GRAD_FLOOR));
            checked += 1;
        }
    }
    (worst, checked)
}

fn rand_t(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor::uniform(shape, lo, hi, rng)
}

fn initialized_site(channels: usize, tau: f64, lambda: f64, rng: &mut ChaCha8Rng) -> SsrSite {
    let config = SsrConfig {
        tau,
        lambda,
        ..SsrConfig::default()
    };
    let mut site = SsrSite::new(1, 2, channels, config);
    for p in &mut site.prototypes {
        let stats = ChannelStats {
            mu: (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sigma: (0..channels).map(|_| rng.random_range(0.5..1.5)).collect(),
        };
        p.update(&stats, 0.95, true).unwrap();
    }
    site
}

type OpCase = (&'static str, Vec<Tensor64>, Box<dyn Fn(&mut Graph64, &[Var]) -> Vec<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    let x = rand_t([2, 3, 6, 6], -1.0, 1.0, rng);
    cases.push((
        "conv2d 3x3",
        vec![x.clone(), rand_t([4, 3, 3, 3], -0.5, 0.5, rng), rand_t([4, 1, 1, 1], -0.5, 0.5, rng)],
        Box::new(|g, v| vec![g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()]),
    ));
    cases.push((
        "conv2d 1x1",
        vec![x.clone(), rand_t([2, 3, 1, 1], -0.5, 0.5, rng)],
        Box::new(|g, v| vec![g.conv2d(v[0], v[1], None, 1, 0).unwrap()]),
    ));
    let gamma = rand_t([1, 3, 1, 1], 0.5, 1.5, rng);
    let beta = rand_t([1, 3, 1, 1], -0.5, 0.5, rng);
    cases.push((
        "batch_norm (batch statistics)",
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(|g, v| vec![g.batch_norm(v[0], v[1], v[2], None, 1e-5).unwrap().0]),
    ));
    cases.push((
        "batch_norm (running statistics)",
        vec![x.clone(), gamma, beta],
        Box::new(|g, v| {
            let (m, var) = ([0.1, -0.2, 0.3], [0.5, 1.2, 0.9]);
            vec![g.batch_norm(v[0], v[1], v[2], Some((&m, &var)), 1e-5).unwrap().0]
        }),
    ));
    for (name, f) in [
        ("leaky_relu", Graph64::leaky_relu as fn(&mut Graph64, Var) -> _),
        ("tanh", Graph64::tanh),
        ("sigmoid", Graph64::sigmoid),
        ("sin", Graph64::sin),
        ("cos", Graph64::cos),
    ] {
        cases.push((name, vec![x.clone()], Box::new(move |g, v| vec![f(g, v[0]).unwrap()])));
    }
    let b = rand_t([1, 3, 1, 6], 0.5, 1.5, rng);
    for (name, f) in [
        ("add (broadcast)", Graph64::add as fn(&mut Graph64, Var, Var) -> _),
        ("sub (broadcast)", Graph64::sub),
        ("mul (broadcast)", Graph64::mul),
        ("div (broadcast)", Graph64::div),
    ] {
        cases.push((name, vec![x.clone(), b.clone()], Box::new(move |g, v| vec![f(g, v[0], v[1]).unwrap()])));
    }
    cases.push(("affine", vec![x.clone()], Box::new(|g, v| vec![g.affine(v[0], -1.7, 0.3).unwrap()])));
    for (name, axis) in [
        ("axis_mean height", s2cp_core::tensor::Axis::Height),
        ("axis_mean width", s2cp_core::tensor::Axis::Width),
        ("axis_mean spatial", s2cp_core::tensor::Axis::Spatial),
    ] {
        cases.push((name, vec![x.clone()], Box::new(move |g, v| vec![g.axis_mean(v[0], axis).unwrap()])));
    }
    cases.push(("sum_all", vec![x.clone()], Box::new(|g, v| vec![g.sum_all(v[0]).unwrap()])));
    cases.push((
        "concat_channels",
        vec![x.clone(), rand_t([2, 2, 6, 6], -1.0, 1.0, rng)],
        Box::new(|g, v| vec![g.concat_channels(v[0], v[1]).unwrap()]),
    ));
    cases.push(("slice_channels", vec![x.clone()], Box::new(|g, v| vec![g.slice_channels(v[0], 1, 2).unwrap()])));
    let small = rand_t([2, 3, 4, 4], -1.0, 1.0, rng);
    cases.push((
        "upsample bilinear",
        vec![small.clone()],
        Box::new(|g, v| vec![g.upsample2(v[0], Upsample::Bilinear).unwrap()]),
    ));
    cases.push((
        "upsample nearest",
        vec![small],
        Box::new(|g, v| vec![g.upsample2(v[0], Upsample::Nearest).unwrap()]),
    ));
    cases.push(("maxpool2", vec![x.clone()], Box::new(|g, v| vec![g.maxpool2(v[0]).unwrap()])));
    let re = rand_t([2, 2, 8, 8], -1.0, 1.0, rng);
    let im = rand_t([2, 2, 8, 8], -1.0, 1.0, rng);
    cases.push((
        "fft2 (real input)",
        vec![re.clone()],
        Box::new(|g, v| {
            let (a, b) = g.fft2(v[0], None).unwrap();
            vec![a, b]
        }),
    ));
    cases.push((
        "fft2 (complex input)",
        vec![re.clone(), im.clone()],
        Box::new(|g, v| {
            let (a, b) = g.fft2(v[0], Some(v[1])).unwrap();
            vec![a, b]
        }),
    ));
    cases.push((
        "ifft2",
        vec![re.clone(), im.clone()],
        Box::new(|g, v| {
            let (a, b) = g.ifft2(v[0], v[1]).unwrap();
            vec![a, b]
        }),
    ));
    cases.push((
        "magnitude",
        vec![re.clone(), im.clone()],
        Box::new(|g, v| vec![g.magnitude(v[0], v[1], 1e-8).unwrap()]),
    ));
    cases.push(("phase", vec![re, im], Box::new(|g, v| vec![g.phase(v[0], v[1]).unwrap()])));
    let pred = rand_t([2, 1, 6, 6], 0.05, 0.95, rng);
    let target = Tensor::from_fn([2, 1, 6, 6], |[n, _, h, w]| if (n + h * w) % 3 == 0 { 1.0 } else { 0.0 });
    cases.push((
        "soft_iou_loss",
        vec![pred],
        Box::new(move |g, v| {
            let t = g.constant(target.clone()).unwrap();
            vec![soft_iou_loss(g, v[0], t).unwrap()]
        }),
    ));
    let site = initialized_site(6, 0.5, 0.3, rng);
    cases.push((
        "style recomposition",
        vec![rand_t([3, 6, 4, 4], -1.0, 1.0, rng)],
        Box::new(move |g, v| vec![site.clone().forward(g, v[0], false, None).unwrap()]),
    ));
    cases
}

/// Analytic vs numeric parameter gradients of `sum(prob * R)` through a
/// whole model, at `count` random parameter coordinates.
fn check_model(model: &Model64, x: &Tensor64, mode: Mode, domains: Option<&[usize]>, count: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let r = rand_t([x.dims()[0], 1, x.dims()[2], x.dims()[3]], -1.0, 1.0, rng);
    let loss_of = |m: &Model64| -> f64 {
        let mut m = m.clone();
        let mut g = Graph64::new();
        let xv = g.constant(x.clone()).unwrap();
        let pass = m.forward(&mut g, xv, mode, domains).unwrap();
        g.value(pass.prob).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut m = model.clone();
    let mut g = Graph64::new();
    let xv = g.constant(x.clone()).unwrap();
    let pass = m.forward(&mut g, xv, mode, domains).unwrap();
    let rv = g.constant(r.clone()).unwrap();
    let p = g.mul(pass.prob, rv).unwrap();
    let loss = g.sum_all(p).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads(&m.store);

    let ids: Vec<_> = model.store.ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| model.store.value(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let mut k = rng.random_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let id = ids[which];
        let analytic = grads[id.index()].as_ref().map_or(0.0, |t| t.data()[k]);
        let base = model.store.value(id).data().to_vec();
        let numeric = central_difference(
            |vals| {
                let mut mm = model.clone();
                mm.store.value_mut(id).data_mut().copy_from_slice(vals);
                loss_of(&mm)
            },
            &base,
            k,
            FD_STEP,
        );
        let err = relative_error(analytic, numeric, GRAD_FLOOR);
        if err > GRAD_TOL {
            println!(
                "    {}[{k}]: analytic {analytic:.6e}, numeric {numeric:.6e}",
                model.store.name(id)
            );
        }
        worst = worst.max(err);
    }
    (worst, count)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_op: (f64, &str) = (0.0, "");
    let mut op_checks = 0;
    let cases = op_cases(&mut rng);
    let n_ops = cases.len();
    for (name, inputs, build) in cases {
        let (err, n) = check_op(&inputs, 12, &mut rng, &*build);
        op_checks += n;
        if err > worst_op.0 {
            worst_op = (err, name);
        }
        if err >= GRAD_TOL {
            println!("    op {name}: relative error {err:.3e}");
        }
    }

    // full model, 1x2x16x16, every component on
    let config = ModelConfig {
        stages: 4,
        base_channels: 4,
        in_channels: 2,
        input_size: (16, 16),
        ..ModelConfig::default()
    };
    let mut model = Model64::new(config.clone(), &mut rng).unwrap();
    // one train-mode pass per domain sets batch-norm statistics and style prototypes
    for d in 0..2 {
        let warm = rand_t([2, 2, 16, 16], -1.0, 1.0, &mut rng);
        let mut g = Graph64::new();
        let xv = g.constant(warm).unwrap();
        model.forward(&mut g, xv, Mode::Train, Some(&[d, d])).unwrap();
    }
    let x = rand_t([1, 2, 16, 16], -1.0, 1.0, &mut rng);
    let (eval_err, eval_n) = check_model(&model, &x, Mode::Eval, None, 60, &mut rng);

    // train mode (batch statistics) with prototype updates switched off
    let train_model = Model64::new(
        ModelConfig {
            ssr: false,
            ..config
        },
        &mut rng,
    )
    .unwrap();
    let xb = rand_t([2, 2, 16, 16], -1.0, 1.0, &mut rng);
    let (train_err, train_n) = check_model(&train_model, &xb, Mode::Train, None, 60, &mut rng);

    let secs = start.elapsed().as_secs_f64();
    let pass = worst_op.0 < GRAD_TOL && eval_err < GRAD_TOL && train_err < GRAD_TOL && secs < 120.0;
    outcome(
        pass,
        format!(
            "{n_ops} ops / {op_checks} coords, worst {:.2e} ({}); full model eval {eval_n} params worst {eval_err:.2e}, train {train_n} params worst {train_err:.2e}; {secs:.1}s",
            worst_op.0, worst_op.1
        ),
    )
}

// ---------------------------------------------------------------------- fft

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut dft_err, mut trip_err, mut parseval_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let n = 8;
    for _ in 0..100 {
        let re = rand_t([1, 1, n, n], -1.0, 1.0, &mut rng);
        let im = rand_t([1, 1, n, n], -1.0, 1.0, &mut rng);
        let mut g = Graph64::new();
        let (rv, iv) = (g.constant(re.clone()).unwrap(), g.constant(im.clone()).unwrap());
        let (fr, fi) = g.fft2(rv, Some(iv)).unwrap();
        let (br, bi) = g.ifft2(fr, fi).unwrap();
        let (fr, fi) = (g.value(fr).data().to_vec(), g.value(fi).data().to_vec());
        for ky in 0..n {
            for kx in 0..n {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let a = -2.0 * std::f64::consts::PI * ((ky * y + kx * x) as f64) / n as f64;
                        let (c, s) = (a.cos(), a.sin());
                        let (xr, xi) = (re.data()[y * n + x], im.data()[y * n + x]);
                        sr += xr * c - xi * s;
                        si += xr * s + xi * c;
                    }
                }
                let k = ky * n + kx;
                dft_err = dft_err.max((sr - fr[k]).abs()).max((si - fi[k]).abs());
            }
        }
        trip_err = trip_err
            .max(g.value(br).max_abs_diff(&re))
            .max(g.value(bi).max_abs_diff(&im));
        let e_space: f64 = re.data().iter().zip(im.data()).map(|(a, b)| a * a + b * b).sum();
        let e_freq: f64 = fr.iter().zip(&fi).map(|(a, b)| a * a + b * b).sum::<f64>() / (n * n) as f64;
        parseval_err = parseval_err.max((e_space - e_freq).abs() / e_space);
    }
    outcome(
        dft_err < 1e-6 && trip_err < 1e-6 && parseval_err < 1e-6,
        format!("DFT max err {dft_err:.2e}, round trip {trip_err:.2e}, Parseval rel {parseval_err:.2e}"),
    )
}

// ---------------------------------------------------------------------- prm

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for c in [1, 3, 8] {
        let mut store = ParamStore::<f64>::new();
        let mut prm = Prm::new(&mut store, "prm", c, PrmInit::Zero, &mut rng);
        for train in [true, false] {
            let mut g = Graph64::new();
            let x = rand_t([2, c, 16, 8], -3.0, 3.0, &mut rng);
            let xv = g.constant(x.clone()).unwrap();
            let y = prm.forward(&mut g, &store, xv, train).unwrap();
            worst = worst.max(g.value(y).max_abs_diff(&x));
        }
    }
    outcome(worst < 1e-9, format!("max |PRM(E) - E| = {worst:.2e} over 6 configurations"))
}

// ---------------------------------------------------------------------- oam

fn permute_rows(t: &Tensor64, perm: &[usize]) -> Tensor64 {
    Tensor::from_fn(t.shape(), |[n, c, h, w]| t.at(n, c, perm[h], w))
}

fn permute_cols(t: &Tensor64, perm: &[usize]) -> Tensor64 {
    Tensor::from_fn(t.shape(), |[n, c, h, w]| t.at(n, c, h, perm[w]))
}

fn oam_mask(oam: &Oam, store: &ParamStore<f64>, e: &Tensor64, d: &Tensor64, kind: Attention) -> Tensor64 {
    let mut g = Graph64::new();
    let (ev, dv) = (g.constant(e.clone()).unwrap(), g.constant(d.clone()).unwrap());
    let (_, m) = oam.refine(&mut g, store, ev, dv, kind).unwrap();
    g.value(m).clone()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut equi, mut inv, mut changed): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..10 {
        let mut store = ParamStore::<f64>::new();
        let oam = Oam::new(&mut store, "oam", 6, Init::Kaiming, &mut rng);
        let e = rand_t([2, 6, 8, 12], -1.0, 1.0, &mut rng);
        let d = rand_t([2, 6, 8, 12], -1.0, 1.0, &mut rng);
        let mut rows: Vec<usize> = (0..8).collect();
        let mut cols: Vec<usize> = (0..12).collect();
        for i in (1..rows.len()).rev() {
            rows.swap(i, rng.random_range(0..=i));
        }
        for i in (1..cols.len()).rev() {
            cols.swap(i, rng.random_range(0..=i));
        }
        let base = oam_mask(&oam, &store, &e, &d, Attention::Orthogonal);
        let by_rows = oam_mask(&oam, &store, &permute_rows(&e, &rows), &permute_rows(&d, &rows), Attention::Orthogonal);
        let by_cols = oam_mask(&oam, &store, &permute_cols(&e, &cols), &permute_cols(&d, &cols), Attention::Orthogonal);
        equi = equi
            .max(by_rows.max_abs_diff(&permute_rows(&base, &rows)))
            .max(by_cols.max_abs_diff(&permute_cols(&base, &cols)));
        // the orthogonal mask is positional: it does move with the rows
        changed = changed.max(by_rows.max_abs_diff(&base));

        let pooled = oam_mask(&oam, &store, &e, &d, Attention::GlobalPool);
        let pooled_rows = oam_mask(&oam, &store, &permute_rows(&e, &rows), &permute_rows(&d, &rows), Attention::GlobalPool);
        let pooled_cols = oam_mask(&oam, &store, &permute_cols(&e, &cols), &permute_cols(&d, &cols), Attention::GlobalPool);
        inv = inv.max(pooled_rows.max_abs_diff(&pooled)).max(pooled_cols.max_abs_diff(&pooled));
    }
    outcome(
        equi < 1e-9 && inv < 1e-9 && changed > 1e-3,
        format!(
            "orthogonal mask equivariance err {equi:.2e} (moves by {changed:.2e} under permutation); global-pool invariance err {inv:.2e}"
        ),
    )
}

// ---------------------------------------------------------------------- ssr

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stats_of = |c: usize, rng: &mut ChaCha8Rng| ChannelStats {
        mu: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        sigma: (0..c).map(|_| rng.random_range(0.3..2.0)).collect(),
    };

    let mut kappa_err: f64 = 0.0;
    let mut kl_err: f64 = 0.0;
    for _ in 0..50 {
        let s = stats_of(4, &mut rng);
        let protos: Vec<StylePrototype> = (0..3)
            .map(|m| {
                let mut p = StylePrototype::new(m, 4);
                p.update(&stats_of(4, &mut rng), 0.95, true).unwrap();
                p
            })
            .collect();
        let kappa = attribution(&s, &protos).unwrap();
        kappa_err = kappa_err.max((kappa.iter().sum::<f64>() - 1.0).abs());

        let p = &protos[0];
        let quad: f64 = (0..4)
            .map(|c| {
                let (m1, s1, m2, s2) = (s.mu[c], s.sigma[c], p.mu[c], p.sigma[c]);
                let logn = |x: f64, m: f64, sd: f64| -0.5 * ((x - m) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                simpson(
                    |x| logn(x, m1, s1).exp() * (logn(x, m1, s1) - logn(x, m2, s2)),
                    m1 - 14.0 * s1,
                    m1 + 14.0 * s1,
                    20_000,
                )
            })
            .sum();
        kl_err = kl_err.max((quad - gaussian_kl(&s, p).unwrap()).abs());
    }

    // lambda = 1 keeps every channel bit-for-bit
    let site = initialized_site(8, 0.5, 1.0, &mut rng);
    let x = rand_t([3, 8, 6, 6], -2.0, 2.0, &mut rng);
    let mut g = Graph64::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = site.clone().forward(&mut g, xv, false, None).unwrap();
    let ident_err = g.value(y).max_abs_diff(&x);

    // EMA: error to a fixed target shrinks by alpha each step
    let mut ratio_err: f64 = 0.0;
    let mut p = StylePrototype::new(0, 5);
    p.update(&stats_of(5, &mut rng), 0.95, true).unwrap();
    let target = stats_of(5, &mut rng);
    for _ in 0..20 {
        let before: Vec<f64> = p.mu.iter().zip(&target.mu).map(|(a, b)| a - b).chain(p.sigma.iter().zip(&target.sigma).map(|(a, b)| a - b)).collect();
        p.update(&target, 0.95, true).unwrap();
        let after: Vec<f64> = p.mu.iter().zip(&target.mu).map(|(a, b)| a - b).chain(p.sigma.iter().zip(&target.sigma).map(|(a, b)| a - b)).collect();
        for (b, a) in before.iter().zip(&after) {
            ratio_err = ratio_err.max((a / b - 0.95).abs());
        }
    }

    let stats10 = stats_of(10, &mut rng);
    let picked = activation_mask(&stats10, 0.3, Ranking::Sigma).iter().filter(|&&m| m).count();
    let pass = kappa_err < 1e-9 && kl_err < 1e-5 && ident_err == 0.0 && ratio_err < 1e-12 && picked == 3 && selected_count(0.3, 10) == 3;
    outcome(
        pass,
        format!(
            "|sum kappa - 1| {kappa_err:.1e}; KL vs quadrature {kl_err:.1e}; lambda=1 diff {ident_err:.1e}; EMA ratio err {ratio_err:.1e}; tau=0.3,C=10 -> {picked} channels"
        ),
    )
}

// ------------------------------------------------------------------ metrics

/// 8-connected components by union-find over raster neighbours.
fn oracle_components(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (m.height, m.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            for (dy, dx) in [(-1isize, -1isize), (-1, 0), (-1, 1), (0, -1)] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (nx as usize) < w && m.get(ny as usize, nx as usize) {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny as usize * w + nx as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) {
                let r = find(&mut parent, y * w + x);
                groups.entry(r).or_default().push((y, x));
            }
        }
    }
    groups.into_values().collect()
}

/// (detected, targets, false-alarm pixels) by brute force over all pixel pairs.
fn oracle_targets(pred: &BinaryMask, gt: &BinaryMask, r: f64) -> (u64, u64, u64) {
    let comps = oracle_components(gt);
    let centroids: Vec<(f64, f64)> = comps
        .iter()
        .map(|c| {
            let k = c.len() as f64;
            (c.iter().map(|p| p.0 as f64).sum::<f64>() / k, c.iter().map(|p| p.1 as f64).sum::<f64>() / k)
        })
        .collect();
    let near = |y: usize, x: usize, c: (f64, f64)| ((y as f64 - c.0).powi(2) + (x as f64 - c.1).powi(2)).sqrt() <= r;
    let mut detected = 0;
    for (comp, &c) in comps.iter().zip(&centroids) {
        let hit = (0..pred.height).any(|y| {
            (0..pred.width).any(|x| pred.get(y, x) && (comp.contains(&(y, x)) || near(y, x, c)))
        });
        detected += u64::from(hit);
    }
    let mut fa = 0;
    for y in 0..pred.height {
        for x in 0..pred.width {
            if pred.get(y, x) && !gt.get(y, x) && !centroids.iter().any(|&c| near(y, x, c)) {
                fa += 1;
            }
        }
    }
    (detected, comps.len() as u64, fa)
}

fn random_blobs(rng: &mut ChaCha8Rng, n: usize, count: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(n, n);
    for _ in 0..count {
        let (cy, cx) = (rng.random_range(0..n), rng.random_range(0..n));
        let r: f64 = rng.random_range(0.5..2.5);
        for y in 0..n {
            for x in 0..n {
                if ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt() <= r {
                    m.set(y, x, true);
                }
            }
        }
    }
    // a little salt noise
    for _ in 0..rng.random_range(0..4) {
        m.set(rng.random_range(0..n), rng.random_range(0..n), true);
    }
    m
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..50 {
        let (ng, np) = (rng.random_range(0..4), rng.random_range(0..5));
        let gt = random_blobs(&mut rng, 32, ng);
        let pred = random_blobs(&mut rng, 32, np);
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &t) in pred.bits().iter().zip(gt.bits()) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let c = pixel_counts(&[pred.clone()], &[gt.clone()]).unwrap();
        let iou = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        let f1 = if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        let t = match_targets(&pred, &gt, DEFAULT_MATCH_RADIUS, MatchRule::Neighborhood);
        let (d, n, fa) = oracle_targets(&pred, &gt, DEFAULT_MATCH_RADIUS);
        let pd = if n == 0 { 0.0 } else { d as f64 / n as f64 };
        let fa_e6 = fa as f64 / 1024.0 * 1e6;
        if (c.tp, c.fp, c.fn_) != (tp, fp, fn_)
            || (c.iou() - iou).abs() > 1e-12
            || (c.f1() - f1).abs() > 1e-12
            || (t.detected, t.targets, t.false_alarm_pixels) != (d, n, fa)
            || (t.pd() - pd).abs() > 1e-12
            || (t.fa() - fa_e6).abs() > 1e-9
        {
            mismatches += 1;
        }
        preds.push(pred);
        gts.push(gt);
    }

    // ROC: smooth random probability maps around the ground truth
    let mut violations = 0;
    let mut pairs = 0;
    for trial in 0..10 {
        let probs: Vec<GrayImage> = gts
            .iter()
            .map(|gt| {
                let mut img = GrayImage::filled(32, 32, 0.0);
                for y in 0..32 {
                    for x in 0..32 {
                        let base = if gt.get(y, x) { 0.6 } else { 0.2 };
                        img.set(y, x, (base + rng.random_range(-0.3..0.3f64) * (1.0 + trial as f64 / 10.0)).clamp(0.0, 1.0));
                    }
                }
                img
            })
            .collect();
        let roc = roc_sweep(&probs, &gts, &default_thresholds(40), DEFAULT_MATCH_RADIUS, MatchRule::Neighborhood).unwrap();
        for w in roc.windows(2) {
            pairs += 1;
            // thresholds descend, so both rates may only grow
            if w[1].pd < w[0].pd || w[1].fa < w[0].fa {
                violations += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && violations == 0,
        format!("{mismatches}/50 mask pairs disagree with the brute-force oracle; ROC violations {violations}/{pairs} adjacent pairs"),
    )
}

// ------------------------------------------------------------------- parity

fn rec(ck: &Checkpoint, name: &str) -> Tensor64 {
    ck.require(name).unwrap().to_tensor().unwrap()
}

/// A plain U-Net assembled directly from checkpoint records: two
/// conv-BN-LReLU per encoder stage, max-pool between stages, 1x1
/// projection + bilinear upsampling + concat + conv-BN-LReLU per decoder
/// stage, 1x1 head and sigmoid.
fn plain_unet(g: &mut Graph64, ck: &Checkpoint, x: Var, stages: usize, eval: bool) -> Var {
    let conv = |g: &mut Graph64, x: Var, p: &str, pad: usize| {
        let w = g.constant(rec(ck, &format!("{p}.weight"))).unwrap();
        let b = g.constant(rec(ck, &format!("{p}.bias"))).unwrap();
        g.conv2d(x, w, Some(b), 1, pad).unwrap()
    };
    let block = |g: &mut Graph64, x: Var, p: &str| {
        let y = conv(g, x, &format!("{p}.conv"), 1);
        let gamma = g.constant(rec(ck, &format!("{p}.bn.gamma"))).unwrap();
        let beta = g.constant(rec(ck, &format!("{p}.bn.beta"))).unwrap();
        let stats;
        let running = if eval {
            stats = (
                rec(ck, &format!("{p}.bn.running_mean")).data().to_vec(),
                rec(ck, &format!("{p}.bn.running_var")).data().to_vec(),
            );
            Some((&stats.0[..], &stats.1[..]))
        } else {
            None
        };
        let (y, _) = g.batch_norm(y, gamma, beta, running, 1e-5).unwrap();
        g.leaky_relu(y).unwrap()
    };
    let mut skips = Vec::new();
    let mut cur = x;
    for l in 1..=stages {
        if l > 1 {
            cur = g.maxpool2(cur).unwrap();
        }
        cur = block(g, cur, &format!("enc{l}.block1"));
        cur = block(g, cur, &format!("enc{l}.block2"));
        skips.push(cur);
    }
    let mut d = skips[stages - 1];
    for l in (1..stages).rev() {
        let up = conv(g, d, &format!("dec{l}.project"), 0);
        let up = g.upsample2(up, Upsample::Bilinear).unwrap();
        let cat = g.concat_channels(skips[l - 1], up).unwrap();
        d = block(g, cat, &format!("dec{l}.block"));
    }
    let logits = conv(g, d, "head", 0);
    g.sigmoid(logits).unwrap()
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = ModelConfig {
        base_channels: 4,
        input_size: (32, 32),
        ..ModelConfig::default()
    }
    .baseline();
    let mut model = Model64::new(config, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    for eval in [false, true] {
        let x = rand_t([3, 1, 32, 32], 0.0, 1.0, &mut rng);
        let mut g = Graph64::new();
        let xv = g.constant(x.clone()).unwrap();
        let mode = if eval { Mode::Eval } else { Mode::Train };
        // records are stored as f32: snap the model onto them so both
        // networks see bit-identical weights and statistics
        let ck_before = model.to_checkpoint();
        model.load_checkpoint(&ck_before).unwrap();
        let out = model.forward(&mut g, xv, mode, None).unwrap().prob;
        let ours = g.value(out).clone();
        let mut h = Graph64::new();
        let xv = h.constant(x).unwrap();
        let theirs = plain_unet(&mut h, &ck_before, xv, 4, eval);
        worst = worst.max(ours.max_abs_diff(h.value(theirs)));
    }
    outcome(worst < 1e-9, format!("max |S2CP(all off) - plain U-Net| = {worst:.2e} (train and eval mode)"))
}

// -------------------------------------------------------------- experiments

fn cfg_with(pairs: &[(&str, String)]) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c
}

fn manifest(root: &Path, d: usize) -> String {
    root.join(format!("domain-{d}/manifest.tsv")).display().to_string()
}

fn criterion_8(work: &Path) -> Outcome {
    let start = Instant::now();
    let data = work.join("c8-data");
    commands::gen_data(&cfg_with(&[
        ("data.out", data.display().to_string()),
        ("data.count", "250".into()),
        ("data.domains", "0,1,2".into()),
    ]))
    .unwrap();
    let sources = format!("{},{}", manifest(&data, 0), manifest(&data, 1));
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut ious = [0.0; 2];
        for (k, full) in [true, false].into_iter().enumerate() {
            let on = full.to_string();
            let out = work.join(format!("c8-{}-seed{seed}", if full { "full" } else { "base" }));
            let cfg = cfg_with(&[
                ("out", out.display().to_string()),
                ("model.prm", on.clone()),
                ("model.oam", on.clone()),
                ("model.ssr", on),
                ("train.manifests", sources.clone()),
                ("train.epochs", "30".into()),
                ("train.seed", seed.to_string()),
                ("eval.manifest", manifest(&data, 2)),
            ]);
            commands::train(&cfg).unwrap();
            ious[k] = commands::eval(&cfg).unwrap().iou;
            println!(
                "    seed {seed} {}: held-out IoU {:.4} ({:.0}s elapsed)",
                if full { "full" } else { "baseline" },
                ious[k],
                start.elapsed().as_secs_f64()
            );
        }
        wins += usize::from(ious[0] > ious[1]);
        lines.push(format!("seed {seed}: {:.4} vs {:.4}", ious[0], ious[1]));
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    outcome(
        wins == 3 && mins < 45.0,
        format!(
            "full beats baseline in {wins}/3 seeds [{}]; {mins:.1} min on {cores} core(s), budget 45 min",
            lines.join("; ")
        ),
    )
}

fn criterion_9(work: &Path) -> Outcome {
    let start = Instant::now();
    let data = work.join("c9-data");
    commands::gen_data(&cfg_with(&[
        ("data.out", data.display().to_string()),
        ("data.preset", "phase_pair".into()),
        ("data.count", "200".into()),
    ]))
    .unwrap();
    let spectra_start = Instant::now();
    let rows = commands::spectra(&cfg_with(&[
        ("out", work.join("c9-spectra").display().to_string()),
        ("spectra.manifests", format!("{},{}", manifest(&data, 0), manifest(&data, 1))),
    ]))
    .unwrap();
    let spectra_secs = spectra_start.elapsed().as_secs_f64();
    let total = start.elapsed().as_secs_f64();
    let d = &rows[0];
    outcome(
        d.congruency > d.magnitude && total < 60.0,
        format!(
            "congruency divergence {:.4} vs magnitude divergence {:.4}; spectra {spectra_secs:.1}s, with generation {total:.1}s",
            d.congruency, d.magnitude
        ),
    )
}

fn criterion_10(work: &Path) -> Outcome {
    let data = work.join("c10-data");
    commands::gen_data(&cfg_with(&[
        ("data.out", data.display().to_string()),
        ("data.count", "40".into()),
        ("data.domains", "0,1".into()),
        ("data.size", "32".into()),
        ("data.diameter", "2,7".into()),
    ]))
    .unwrap();
    let run = |name: &str| {
        let out = work.join(name);
        let cfg = cfg_with(&[
            ("out", out.display().to_string()),
            ("model.input_size", "32".into()),
            ("model.base_channels", "4".into()),
            ("train.manifests", format!("{},{}", manifest(&data, 0), manifest(&data, 1))),
            ("train.epochs", "3".into()),
            ("train.seed", "11".into()),
        ]);
        commands::train(&cfg).unwrap();
        std::fs::read_to_string(out.join("train_log.csv")).unwrap()
    };
    let a = run("c10-a");
    let b = run("c10-b");
    // the echoed config reproduces the run as well
    let resolved = RunConfig::load(&work.join("c10-a/resolved.conf")).unwrap();
    let mut again = resolved.clone();
    again.set("out", &work.join("c10-c").display().to_string()).unwrap();
    commands::train(&again).unwrap();
    let c = std::fs::read_to_string(work.join("c10-c/train_log.csv")).unwrap();
    let rows = a.lines().count() - 1;
    outcome(
        a == b && a == c && rows > 0,
        format!("{rows} log rows; identical across two runs: {}; rerun from resolved config: {}", a == b, a == c),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let work = tempfile::tempdir().unwrap();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "gradient suite", Box::new(criterion_1)),
        (2, "FFT oracle", Box::new(criterion_2)),
        (3, "PRM identity", Box::new(criterion_3)),
        (4, "OAM positional property", Box::new(criterion_4)),
        (5, "SSR algebra", Box::new(criterion_5)),
        (6, "metrics oracle and ROC monotonicity", Box::new(criterion_6)),
        (7, "ablation wiring parity", Box::new(criterion_7)),
        (8, "cross-domain directional result", Box::new(|| criterion_8(work.path()))),
        (9, "phase vs magnitude spectra", Box::new(|| criterion_9(work.path()))),
        (10, "training determinism", Box::new(|| criterion_10(work.path()))),
    ];
    let full = std::env::var("S2CP_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    for (n, name, run) in &criteria {
        if !wanted.is_empty() && !wanted.contains(n) {
            continue;
        }
        if *n == 8 && wanted.is_empty() && !full {
            println!("criterion  8 SKIP: {name} — about 100 minutes of training on one core; run with S2CP_ACCEPTANCE_FULL=1 or pass 8");
            continue;
        }
        let o = run();
        println!("criterion {n:>2} {}: {name} — {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(*n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
