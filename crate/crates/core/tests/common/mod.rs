//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nmfnet::tensor::{Graph, ParamKind, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with a floor on the denominator so that gradients that are
/// zero on both routes compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Relative error whose denominator floor is scaled by the loss magnitude.
pub fn scaled_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds `build(inputs)`, projects its output onto a fixed random direction
/// to get a scalar, and compares backward gradients for every input against
/// central finite differences. Returns the worst relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> nmfnet::Result<Var>,
{
    let scalar = |g: &mut Graph<f64>, vars: &[Var]| -> Var {
        let out = build(g, vars).expect("forward");
        let n = g.value(out).numel();
        let flat = g.reshape(out, &[1, n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.input(random(&[n, 1], &mut rng));
        let b = g.input(Tensor::zeros(&[1]));
        g.dense(flat, w, b).unwrap()
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let l = scalar(&mut g, &vars);
        g.value(l).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| {
            let mut x = x.clone();
            x.requires_grad = true;
            g.leaf(x)
        })
        .collect();
    let loss = scalar(&mut g, &vars);
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let n = g.value(out).numel();
    let flat = g.reshape(out, &[1, n]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(random(&[n, 1], &mut rng));
    let b = g.input(Tensor::zeros(&[1]));
    g.dense(flat, w, b).unwrap()
}

/// Like [`grad_check`] but also perturbs every trainable entry of `store`.
pub fn model_grad_check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>, &[Var]) -> nmfnet::Result<Var>,
{
    let eval = |st: &ParamStore<f64>, xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = build(st, &mut g, &vars).expect("forward");
        let l = project(&mut g, out, seed);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| {
            let mut x = x.clone();
            x.requires_grad = true;
            g.leaf(x)
        })
        .collect();
    let out = build(store, &mut g, &vars).expect("forward");
    let loss = project(&mut g, out, seed);
    g.backward(loss).unwrap();
    // Batchnorm amplifies roundoff in the differences to ~1e-10·|L|;
    // gradients below this floor are compared in absolute terms.
    let floor = 1e-5 * g.value(loss).data()[0].abs().max(1.0);

    let mut worst = 0.0f64;
    let mut st = store.clone();
    for id in store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable) {
        let n = store.get(id).numel();
        let analytic = g.param_grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for j in 0..n {
            let orig = st.get(id).data()[j];
            st.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&st, inputs);
            st.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&st, inputs);
            st.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(scaled_err(analytic[j], (up - down) / (2.0 * FD_STEP), floor));
        }
    }
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(store, &xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(store, &xs);
            xs[i].data_mut()[j] = orig;
            worst = worst.max(scaled_err(analytic[j], (up - down) / (2.0 * FD_STEP), floor));
        }
    }
    worst
}

/// End-to-end check of the tiny three-branch network (8×8 images, 8 points)
/// and of the point branch alone, both in train mode.
pub fn network_gradient_checks() -> Vec<(&'static str, f64)> {
    use nmfnet::cloudnet::CloudBranch;
    use nmfnet::nmfnet::{InputVars, NetConfig, NMFNet, ResNet8, ResNetConfig};
    use nmfnet::tensor::Mode;
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    let cfg = NetConfig::tiny();
    let mut store = ParamStore::<f64>::new();
    let net = NMFNet::new(&mut store, &cfg, 5).unwrap();
    perturb_tnet_heads(&mut store, &mut rng);
    let xs = [random(&[2, 3, 8, 8], &mut rng), random(&[2, 1, 8, 8], &mut rng), random(&[2, 8, 3], &mut rng)];
    out.push((
        "nmfnet tiny",
        model_grad_check(&store, &xs, 31, |st, g, v| {
            let inputs = InputVars { rgb: Some(v[0]), laser: Some(v[1]), cloud: Some(v[2]) };
            Ok(net.forward(st, g, inputs, Mode::Train)?.steering)
        }),
    ));

    let mut store = ParamStore::<f64>::new();
    let branch = CloudBranch::new(&mut store, "cloud", &cfg.cloud, &mut ChaCha8Rng::seed_from_u64(6));
    perturb_tnet_heads(&mut store, &mut rng);
    let xs = [random(&[3, 8, 3], &mut rng)];
    out.push((
        "cloud branch",
        model_grad_check(&store, &xs, 32, |st, g, v| Ok(branch.forward(st, g, v[0], Mode::Train)?.feature)),
    ));

    let mut store = ParamStore::<f64>::new();
    let rcfg = ResNetConfig { in_channels: 1, stem_kernel: 5, widths: vec![2, 2, 3] };
    let resnet = ResNet8::new(&mut store, "rgb", &rcfg, &mut ChaCha8Rng::seed_from_u64(7));
    let xs = [random(&[1, 1, 32, 32], &mut rng)];
    out.push((
        "resnet8 32x32",
        model_grad_check(&store, &xs, 33, |st, g, v| Ok(resnet.forward(st, g, v[0], Mode::Eval)?.feature)),
    ));
    out
}

/// Moves T-net output weights off zero so that their gradient paths are
/// exercised; the identity initialization otherwise hides them.
fn perturb_tnet_heads(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".out.weight")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
}

/// Finite-difference checks for every tensor primitive, `(name, worst error)`.
pub fn primitive_gradient_checks() -> Vec<(&'static str, f64)> {
    use nmfnet::tensor::{Mode, NormStats};
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out = Vec::new();

    let xs = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng)];
    out.push(("dense", grad_check(&xs, 1, |g, v| g.dense(v[0], v[1], v[2]))));

    let xs = [random(&[2, 2], &mut rng), random(&[2, 2], &mut rng), random(&[2], &mut rng), random(&[2, 2], &mut rng)];
    out.push((
        "mse(dense)",
        grad_check(&xs, 2, |g, v| {
            let y = g.dense(v[0], v[1], v[2])?;
            g.mse(y, v[3])
        }),
    ));

    let xs = [random(&[2, 2, 6, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)];
    out.push(("conv2d s1 p1", grad_check(&xs, 3, |g, v| g.conv2d(v[0], v[1], v[2], 1, 1))));
    out.push(("conv2d s2 p1", grad_check(&xs, 4, |g, v| g.conv2d(v[0], v[1], v[2], 2, 1))));
    let xs5 = [random(&[1, 1, 7, 8], &mut rng), random(&[2, 1, 5, 5], &mut rng), random(&[2], &mut rng)];
    out.push(("conv2d 5x5 s2 p2", grad_check(&xs5, 5, |g, v| g.conv2d(v[0], v[1], v[2], 2, 2))));

    let (m, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    let bn_in = [random(&[3, 3, 2, 2], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
    for (name, mode) in [("batchnorm train", Mode::Train), ("batchnorm eval", Mode::Eval)] {
        out.push((
            name,
            grad_check(&bn_in, 6, |g, v| {
                let stats = NormStats { running_mean: &m, running_var: &var, eps: 1e-5, momentum: 0.9 };
                Ok(g.batchnorm(v[0], v[1], v[2], stats, mode)?.0)
            }),
        ));
    }
    let bn2 = [random(&[5, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
    out.push((
        "batchnorm rows",
        grad_check(&bn2, 7, |g, v| {
            let stats = NormStats { running_mean: &m, running_var: &var, eps: 1e-5, momentum: 0.9 };
            Ok(g.batchnorm(v[0], v[1], v[2], stats, Mode::Train)?.0)
        }),
    ));

    let xs = [random(&[2, 3, 4], &mut rng)];
    out.push(("relu", grad_check(&xs, 8, |g, v| Ok(g.relu(v[0])))));
    let xs = [random(&[2, 2, 5, 5], &mut rng)];
    out.push(("maxpool2d 3/2", grad_check(&xs, 9, |g, v| g.maxpool2d(v[0], 3, 2))));
    let xs = [random(&[2, 3], &mut rng), random(&[2, 5], &mut rng)];
    out.push(("concat", grad_check(&xs, 10, |g, v| g.concat(&[v[0], v[1]], 1))));
    let xs = [random(&[2, 7, 4], &mut rng)];
    out.push(("reduce_max_axis", grad_check(&xs, 11, |g, v| g.reduce_max_axis(v[0], 1))));
    let xs = [random(&[2, 3, 3, 4], &mut rng)];
    out.push(("global_avg_pool", grad_check(&xs, 12, |g, v| g.global_avg_pool(v[0]))));
    let xs = [random(&[2, 4, 3], &mut rng), random(&[2, 3, 3], &mut rng)];
    out.push(("batch_matmul", grad_check(&xs, 13, |g, v| g.batch_matmul(v[0], v[1]))));
    let xs = [random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)];
    out.push(("add", grad_check(&xs, 14, |g, v| g.add(v[0], v[1]))));
    out.push((
        "shared input",
        grad_check(&xs[..1], 15, |g, v| {
            let r = g.relu(v[0]);
            g.add(r, v[0])
        }),
    ));
    out
}

/// Generates a dataset into a fresh temporary directory.
pub fn small_dataset(
    envs: &[nmfnet::simworld::Archetype],
    episodes: usize,
    frames: usize,
    seed: u64,
) -> (tempfile::TempDir, nmfnet::dataset::Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = nmfnet::dataset::GenConfig {
        envs: envs.to_vec(),
        episodes,
        frames,
        dr_fraction: 0.5,
        seed,
        ..Default::default()
    };
    let manifest = nmfnet::dataset::generate_dataset(&cfg, dir.path()).unwrap();
    (dir, manifest)
}

/// Narrow branches that keep training in tests fast on full-size frames.
pub fn small_net() -> nmfnet::nmfnet::NetConfig {
    use nmfnet::cloudnet::CloudConfig;
    use nmfnet::nmfnet::{NetConfig, ResNetConfig};
    let res = |c| ResNetConfig {
        in_channels: c,
        stem_kernel: 5,
        widths: vec![8, 16, 16],
    };
    NetConfig {
        rgb: res(3),
        laser: res(1),
        cloud: CloudConfig {
            tnet_point: vec![16, 32],
            tnet_head: vec![16],
            lift: vec![16, 16],
            global: vec![32, 64],
        },
        fusion: vec![32, 16],
        ..NetConfig::default()
    }
}
