use std::fs;

use grdh::nets::{
    self, build_discriminator, build_extractor, build_generator, build_translator, ArchSpec, DiscriminatorHead,
    Network, MANIFEST_FILE,
};
use grdh::Error;
use grdh_autograd::Tensor;
use rand::Rng;

fn random_batch(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = grdh::seed::rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn batch_shape(net: &Network, n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend(net.input_shape());
    s
}

#[test]
fn translator_parameter_count() {
    for (b, r) in [(4usize, 1usize), (8, 2), (5, 3)] {
        let net = build_translator(32, b, r, 0).unwrap();
        let expected = 3 * b * 49
            + b * 2 * b * 9
            + 2 * b * 4 * b * 9
            + r * 2 * (4 * b * 4 * b * 9)
            + 4 * b * 2 * b * 16
            + 2 * b * b * 16
            + b * 3 * 49
            + 3;
        assert_eq!(net.num_params(), expected, "b={b} r={r}");
    }
}

#[test]
fn translator_downsampling_stages() {
    let (b, r) = (4usize, 2usize);
    for d in 0..=3usize {
        let spec = ArchSpec::translator(32, b, r).with_downsamplings(d);
        let net = Network::build(spec, 1).unwrap();
        let trunk = b << d;
        let sides: usize = (0..d).map(|i| (b << i) * (b << (i + 1)) * (9 + 16)).sum();
        let expected = 3 * b * 49 + sides + r * 2 * trunk * trunk * 9 + b * 3 * 49 + 3;
        assert_eq!(net.num_params(), expected, "d={d}");
        let y = net.infer(&random_batch(&[2, 3, 32, 32], d as u64)).unwrap();
        assert_eq!(y.shape(), [2, 3, 32, 32]);
    }
    assert_eq!(ArchSpec::translator(32, 4, 2).arch_id(), "translator/s32-c4-r2");
    assert_eq!(ArchSpec::translator(32, 4, 2).with_downsamplings(0).arch_id(), "translator/s32-c4-r2-d0");
    assert!(Network::build(ArchSpec::translator(16, 4, 1).with_downsamplings(5), 0).is_err());
    assert!(Network::build(ArchSpec::translator(20, 4, 1).with_downsamplings(3), 0).is_err());
}

#[test]
fn extractor_parameter_count() {
    for (size, l, b) in [(16usize, 4usize, 2usize), (32, 32, 32), (64, 100, 8)] {
        let net = Network::build(ArchSpec::extractor(size, l, b), 0).unwrap();
        let mut expected = 0;
        let mut cin = 3;
        for i in 0..4 {
            let cout = b << i;
            expected += cin * cout * 16 + 2 * cout;
            cin = cout;
        }
        let side = size / 16;
        expected += cin * side * side * l + l;
        assert_eq!(net.num_params(), expected, "size={size}");
    }
}

#[test]
fn generator_parameter_count() {
    for (l, size, b) in [(8usize, 16usize, 4usize), (32, 32, 16), (100, 64, 8)] {
        let net = build_generator(l, size, b, 0).unwrap();
        let ups = size.trailing_zeros() as usize - 2;
        let mut c = b << (ups - 1);
        let mut expected = l * c * 16 + 2 * c;
        for _ in 1..ups {
            expected += c * (c / 2) * 16 + c;
            c /= 2;
        }
        expected += c * 3 * 16 + 3;
        assert_eq!(net.num_params(), expected, "size={size}");
    }
}

#[test]
fn paper_scale_extractor_shapes() {
    let net = build_extractor(64, 100, 0).unwrap();
    let table = net.architecture_table().unwrap();
    let convs: Vec<&Vec<usize>> = table.iter().filter(|r| r.kind == "conv").map(|r| &r.output_shape).collect();
    assert_eq!(convs, [&vec![64, 32, 32], &vec![128, 16, 16], &vec![256, 8, 8], &vec![512, 4, 4]]);
    assert_eq!(net.output_shape(), [100]);
}

#[test]
fn batch_composition_does_not_change_inference() {
    let nets = [
        build_generator(8, 16, 4, 1).unwrap(),
        build_translator(16, 4, 1, 2).unwrap(),
        build_discriminator(16, 4, DiscriminatorHead::Patch, 3).unwrap(),
        build_discriminator(16, 4, DiscriminatorHead::Dense, 4).unwrap(),
        build_extractor(16, 8, 5).unwrap(),
    ];
    for net in &nets {
        let x = random_batch(&batch_shape(net, 8), 7);
        let all = net.infer(&x).unwrap();
        for i in 0..8 {
            let one = net.infer(&x.select(i)).unwrap();
            let diff = one.max_abs_diff(&all.select(i));
            assert!(diff < 1e-5, "{}: sample {i} differs by {diff}", net.arch_id());
        }
    }
}

#[test]
fn zeroed_output_layer_gives_constant_output() {
    let mut net = build_translator(16, 4, 1, 9).unwrap();
    for (name, t) in net.params_mut().iter_mut() {
        if name.starts_with("to_rgb.") {
            let v = if name.ends_with("bias") { 0.25 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }
    let out = net.infer(&random_batch(&batch_shape(&net, 2), 1)).unwrap();
    let want = 0.25f32.tanh();
    assert!(out.data().iter().all(|v| (v - want).abs() < 1e-6));
}

#[test]
fn checkpoints_round_trip_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let nets = [
        build_generator(8, 16, 4, 1).unwrap(),
        build_translator(16, 4, 1, 2).unwrap(),
        build_discriminator(16, 4, DiscriminatorHead::Patch, 3).unwrap(),
        build_discriminator(16, 4, DiscriminatorHead::Dense, 4).unwrap(),
        build_extractor(16, 8, 5).unwrap(),
    ];
    for (i, net) in nets.iter().enumerate() {
        let mut net = net.clone();
        net.meta.step = 17;
        net.meta.seed = 99;
        let path = dir.path().join(i.to_string());
        nets::save_checkpoint(&net, &path).unwrap();
        let back = nets::load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.meta, net.meta);
        for (a, b) in net.params().values().zip(back.params().values()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let x = random_batch(&batch_shape(&net, 2), 3);
        assert_eq!(net.infer(&x).unwrap(), back.infer(&x).unwrap());
    }
}

#[test]
fn tampered_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let net = build_generator(8, 16, 4, 1).unwrap();
    nets::save_checkpoint(&net, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("latent_dim = 8", "latent_dim = 9", 1)).unwrap();
    let err = nets::load_checkpoint(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Validation(m) if m.contains("latent_dim")), "{err}");
}

#[test]
fn truncated_blob_names_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let net = build_extractor(16, 8, 5).unwrap();
    nets::save_checkpoint(&net, dir.path()).unwrap();
    let blob = dir.path().join("fc.weight.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
    match nets::load_checkpoint(dir.path()) {
        Err(Error::CorruptCheckpoint { param, .. }) => assert_eq!(param, "fc.weight"),
        other => panic!("expected a corrupt checkpoint, got {other:?}"),
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        nets::load_checkpoint(&dir.path().join("absent")),
        Err(Error::MissingCheckpoint(_))
    ));
}
