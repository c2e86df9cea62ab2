use grdh::data::{synth_domains, SynthStyle};
use grdh::nets::{ArchSpec, DiscriminatorHead, Mode, Network};
use grdh::seed;
use grdh::training::{
    self, cycle_objective, extractor_loss, gan_loss, GeneratorArch, OutputDir, TrainConfig, TranslatorArch,
};
use grdh_autograd::{Graph, Tensor, Var};
use rand::Rng;

/// Builds a scalar loss with every network already attached to the graph.
type Loss<'a> = dyn Fn(&mut Graph<f64>, &mut [Network<f64>]) -> Var + 'a;

fn evaluate(nets: &[Network<f64>], loss: &Loss<'_>) -> f64 {
    let mut nets = nets.to_vec();
    let mut g = Graph::new();
    for n in nets.iter_mut() {
        n.attach(&mut g, false);
    }
    let l = loss(&mut g, &mut nets);
    g.scalar(l)
}

/// Central-difference steps. ReLU and absolute-error kinks lying within the
/// first step of the evaluation point are retried with smaller ones.
const STEPS: [f64; 3] = [1e-6, 1e-7, 1e-8];

/// Smallest denominator of the relative error. Biases feeding a batch norm
/// have an exact zero gradient, and their central difference is round-off.
const FLOOR: f64 = 1e-5;

/// Compares analytic parameter gradients of the networks flagged in `check`
/// against central differences.
fn gradcheck(nets: &[Network<f64>], check: &[bool], loss: &Loss<'_>) {
    let mut attached = nets.to_vec();
    let mut g = Graph::new();
    for (n, &c) in attached.iter_mut().zip(check) {
        n.attach(&mut g, c);
    }
    let l = loss(&mut g, &mut attached);
    let grads = g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &c) in check.iter().enumerate() {
        if !c {
            continue;
        }
        assert!(nets[i].num_params() <= 1000, "{} has {} parameters", nets[i].arch_id(), nets[i].num_params());
        let analytic = attached[i].gradients(&g, &grads).unwrap();
        for (p, name) in nets[i].params().keys().enumerate() {
            for j in 0..analytic[p].numel() {
                let shifted = |d: f64| {
                    let mut ns = nets.to_vec();
                    ns[i].params_mut()[p].data_mut()[j] += d;
                    evaluate(&ns, loss)
                };
                let a = analytic[p].data()[j];
                let (rel, numeric) = STEPS
                    .iter()
                    .map(|&h| {
                        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                        ((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR), numeric)
                    })
                    .find(|(rel, _)| *rel < 1e-3)
                    .unwrap_or_else(|| {
                        let numeric = (shifted(STEPS[0]) - shifted(-STEPS[0])) / (2.0 * STEPS[0]);
                        ((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR), numeric)
                    });
                assert!(rel < 1e-3, "{} {name}[{j}]: analytic {a} numeric {numeric}", nets[i].arch_id());
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst < 1e-3);
}

/// Built network with every parameter moved off its initial value, so that
/// no activation sits exactly on a ReLU kink.
fn net(spec: ArchSpec, seed: u64) -> Network<f64> {
    let mut net: Network<f64> = Network::build(spec, seed).unwrap().cast();
    let mut rng = seed::rng(seed + 100);
    for t in net.params_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    net
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seed::rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-0.95..0.95))
}

#[test]
fn gan_loss_gradients() {
    let g2 = net(ArchSpec::generator(3, 16, 1), 1);
    let d3 = net(ArchSpec::discriminator(16, 1, DiscriminatorHead::Dense), 2);
    let real = random(&[3, 3, 16, 16], 3);
    let z = random(&[3, 3], 4);
    let build = |which: usize| {
        let (real, z) = (real.clone(), z.clone());
        move |g: &mut Graph<f64>, nets: &mut [Network<f64>]| {
            let (a, b) = nets.split_at_mut(1);
            let (rv, zv) = (g.input(real.clone()), g.input(z.clone()));
            let l = gan_loss(g, &mut b[0], &mut a[0], rv, zv, Mode::Train).unwrap();
            if which == 0 {
                l.generator
            } else {
                l.discriminator
            }
        }
    };
    gradcheck(&[g2.clone(), d3.clone()], &[true, false], &build(0));
    gradcheck(&[g2, d3], &[true, true], &build(1));
}

#[test]
fn patch_discriminator_gradients() {
    let d = net(ArchSpec::discriminator(16, 1, DiscriminatorHead::Patch), 5);
    let real = random(&[2, 3, 16, 16], 6);
    let fake = random(&[2, 3, 16, 16], 7);
    gradcheck(&[d], &[true], &|g, nets| {
        let (r, f) = (g.input(real.clone()), g.input(fake.clone()));
        let lr = nets[0].forward(g, r, Mode::Train).unwrap();
        let lf = nets[0].forward(g, f, Mode::Train).unwrap();
        training::discriminator_loss(g, lr, lf).unwrap()
    });
}

#[test]
fn cycle_objective_gradients() {
    let t = ArchSpec::translator(16, 1, 1);
    let d = ArchSpec::discriminator(16, 1, DiscriminatorHead::Patch);
    let nets = [net(t.clone(), 1), net(t, 2), net(d.clone(), 3), net(d, 4)];
    let x = random(&[2, 3, 16, 16], 8);
    let y = random(&[2, 3, 16, 16], 9);
    gradcheck(&nets, &[true, true, false, false], &|g, nets| {
        let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
        let [g1, f, d1, d2] = nets else { unreachable!() };
        cycle_objective(g, g1, f, d1, d2, xv, yv, 10.0).unwrap().total
    });
}

#[test]
fn cycle_term_alone() {
    let t = ArchSpec::translator(16, 1, 1);
    let nets = [net(t.clone(), 11), net(t, 12)];
    let x = random(&[1, 3, 16, 16], 13);
    let y = random(&[1, 3, 16, 16], 14);
    gradcheck(&nets, &[true, true], &|g, nets| {
        let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
        let [g1, f] = nets else { unreachable!() };
        let fy = g1.forward(g, xv, Mode::Train).unwrap();
        let fx = f.forward(g, yv, Mode::Train).unwrap();
        let xr = f.forward(g, fy, Mode::Train).unwrap();
        let yr = g1.forward(g, fx, Mode::Train).unwrap();
        training::cycle_consistency(g, xr, &x, yr, &y).unwrap()
    });
}

#[test]
fn extractor_loss_gradients() {
    let nets = [
        net(ArchSpec::extractor(16, 3, 1), 1),
        net(ArchSpec::translator(16, 1, 1), 2),
        net(ArchSpec::generator(3, 16, 1), 3),
    ];
    let z = random(&[3, 3], 4);
    gradcheck(&nets, &[true, false, false], &|g, nets| {
        let [e, g1, g2] = nets else { unreachable!() };
        extractor_loss(g, e, g1, g2, &z, Mode::Train).unwrap()
    });
}

#[test]
fn extractor_loss_leaves_sender_networks_frozen() {
    let mut nets = [
        net(ArchSpec::extractor(16, 3, 1), 1),
        net(ArchSpec::translator(16, 1, 1), 2),
        net(ArchSpec::generator(3, 16, 1), 3),
    ];
    let z = random(&[2, 3], 4);
    let mut g = Graph::new();
    for n in nets.iter_mut() {
        n.attach(&mut g, true);
    }
    let [e, g1, g2] = &mut nets;
    let l = extractor_loss(&mut g, e, g1, g2, &z, Mode::Train).unwrap();
    let grads = g.backward(l).unwrap();
    for n in [&*g1, &*g2] {
        let gs = n.gradients(&g, &grads).unwrap();
        assert!(gs.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
    assert!(e.gradients(&g, &grads).unwrap().iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
}

fn tiny_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn tiny_translator() -> TranslatorArch {
    TranslatorArch {
        base_channels: 2,
        residual_blocks: 1,
        downsamplings: 2,
        disc_channels: 2,
    }
}

#[test]
fn cyclegan_is_deterministic_and_checkpointed() {
    let (x, y) = synth_domains(SynthStyle::PaletteSwap, 6, 16, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir(dir.path().to_path_buf());
    let a = training::train_cyclegan(&x, &y, &tiny_translator(), &tiny_cfg(3, 5), Some(&out)).unwrap();
    let b = training::train_cyclegan(&x, &y, &tiny_translator(), &tiny_cfg(3, 5), None).unwrap();
    assert_eq!(a.g1, b.g1);
    assert_eq!(a.f, b.f);
    assert_eq!(a.d1, b.d1);
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.get("cycle").unwrap().len(), 3);
    assert_eq!(a.g1.meta.step, 3);
    for name in ["g1", "f", "d1", "d2"] {
        let back = grdh::nets::load_checkpoint(&dir.path().join(name)).unwrap();
        assert_eq!(back.meta.step, 3);
    }
    let tsv = std::fs::read_to_string(dir.path().join("losses.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.starts_with("step\tadv_xy\tadv_yx\tcycle\ttotal\td1\td2\n"));
    let c = training::train_cyclegan(&x, &y, &tiny_translator(), &tiny_cfg(3, 6), None).unwrap();
    assert_ne!(a.g1, c.g1);
}

#[test]
fn zero_steps_return_initial_networks() {
    let (x, _) = synth_domains(SynthStyle::Negative, 4, 16, 2).unwrap();
    let arch = GeneratorArch {
        base_channels: 2,
        disc_channels: 2,
    };
    let r = training::train_generator(&x, 4, &arch, &tiny_cfg(0, 7), None).unwrap();
    assert_eq!(r.report.steps, 0);
    let fresh = Network::build(ArchSpec::generator(4, 16, 2), seed::derive(7, 1)).unwrap();
    assert_eq!(r.g2, fresh);
}

#[test]
fn extractor_training_is_deterministic_and_reduces_loss() {
    let (x, y) = synth_domains(SynthStyle::PaletteSwap, 4, 16, 3).unwrap();
    let ct = training::train_cyclegan(&x, &y, &tiny_translator(), &tiny_cfg(1, 1), None).unwrap();
    let arch = GeneratorArch {
        base_channels: 2,
        disc_channels: 2,
    };
    let gen = training::train_generator(&x, 4, &arch, &tiny_cfg(1, 2), None).unwrap();
    let (g1, g2) = (ct.g1.clone(), gen.g2.clone());
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 8,
        learning_rate: 2e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = training::train_extractor(&g1, &g2, 4, None, &cfg, None).unwrap();
    let b = training::train_extractor(&g1, &g2, 4, None, &cfg, None).unwrap();
    assert_eq!(a.e, b.e);
    assert_eq!(a.report, b.report);
    assert_eq!(g1, ct.g1);
    assert_eq!(g2, gen.g2);
    let first = a.report.mean("loss", 0..10).unwrap();
    let last = a.report.mean("loss", 50..60).unwrap();
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn extractor_rejects_mismatched_chain() {
    let g1 = Network::build(ArchSpec::translator(32, 2, 1), 0).unwrap();
    let g2 = Network::build(ArchSpec::generator(4, 16, 2), 0).unwrap();
    assert!(matches!(
        training::train_extractor(&g1, &g2, 4, None, &tiny_cfg(1, 0), None),
        Err(grdh::Error::Incompatible(_))
    ));
}
