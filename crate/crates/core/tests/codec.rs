use grdh::codec::{self, BitString, CodecParams};
use grdh::seed;
use grdh::Error;
use proptest::prelude::*;
use rand::Rng;

fn params() -> impl Strategy<Value = CodecParams> {
    (1u32..=8, 1usize..=40, 0.0f64..1.0).prop_map(|(k, l, frac)| {
        let max = 0.5f64.powi(k as i32);
        let delta = (frac * max).clamp(1e-6, max * 0.999);
        CodecParams::new(k, delta, l).unwrap()
    })
}

fn message(p: &CodecParams) -> impl Strategy<Value = BitString> {
    proptest::collection::vec(any::<bool>(), 0..=p.capacity_bits()).prop_map(BitString::from_bits)
}

proptest! {
    #[test]
    fn round_trip_reproduces_padded_message((p, m, s) in params().prop_flat_map(|p| (Just(p), message(&p), any::<u64>()))) {
        let noise = codec::encode(&m, &p, &mut seed::rng(s)).unwrap();
        prop_assert_eq!(noise.len(), p.latent_dim());
        prop_assert!(noise.values().iter().all(|v| v.abs() < 1.0));
        let back = codec::decode(noise.values(), &p).unwrap();
        prop_assert_eq!(back.len(), p.capacity_bits());
        prop_assert_eq!(back.truncated(m.len()), m.clone());
        prop_assert!(back.bits()[m.len()..].iter().all(|b| !b));
    }

    #[test]
    fn perturbation_below_delta_is_tolerated((p, m, s) in params().prop_flat_map(|p| (Just(p), message(&p), any::<u64>()))) {
        let mut rng = seed::rng(s);
        let noise = codec::encode(&m, &p, &mut rng).unwrap();
        let shifted: Vec<f64> = noise
            .values()
            .iter()
            .map(|v| v + p.delta() * rng.random_range(-0.999..0.999))
            .collect();
        prop_assert_eq!(codec::decode(&shifted, &p).unwrap().truncated(m.len()), m);
    }

    #[test]
    fn intervals_are_disjoint_and_inside(p in params()) {
        let table = codec::interval_table(&p).unwrap();
        prop_assert_eq!(table.len(), 1usize << p.k());
        for (m, iv) in table.iter().enumerate() {
            prop_assert_eq!(iv.group as usize, m);
            prop_assert!(iv.lo > -1.0 && iv.hi < 1.0 && iv.lo < iv.hi);
            prop_assert!((iv.hi - iv.lo - p.interval_width()).abs() < 1e-12);
        }
        for w in table.windows(2) {
            prop_assert!((w[1].lo - w[0].hi - 2.0 * p.delta()).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_is_full_bin(k in 1u32..=6, r in -1.0f64..=1.0) {
        let p = CodecParams::new(k, 0.5f64.powi(k as i32) / 2.0, 1).unwrap();
        let bits = codec::decode(&[r], &p).unwrap();
        let width = 2.0 / f64::from(1u32 << k);
        let m = (((r + 1.0) / width).floor() as u32).min((1 << k) - 1);
        let expected = BitString::from_bits((0..k).rev().map(|i| (m >> i) & 1 == 1));
        prop_assert_eq!(bits, expected);
    }
}

#[test]
fn every_group_decodes_to_itself() {
    for k in 1..=4u32 {
        for delta in [0.001, 0.01, 0.05] {
            let Ok(p) = CodecParams::new(k, delta, 1) else {
                assert!(delta >= 0.5f64.powi(k as i32));
                continue;
            };
            for m in 0..(1u32 << k) {
                let bits = BitString::from_bits((0..k).rev().map(|i| (m >> i) & 1 == 1));
                for s in 0..20 {
                    let noise = codec::encode(&bits, &p, &mut seed::rng(s)).unwrap();
                    let iv = codec::interval_for_group(m, &p).unwrap();
                    assert!(iv.contains(noise.values()[0]));
                    assert_eq!(codec::decode(noise.values(), &p).unwrap(), bits);
                }
            }
        }
    }
}

#[test]
fn interval_examples() {
    let p = CodecParams::new(3, 0.001, 1).unwrap();
    let first = codec::interval_for_group(0, &p).unwrap();
    let last = codec::interval_for_group(7, &p).unwrap();
    assert!((first.lo + 0.999).abs() < 1e-12 && (first.hi + 0.751).abs() < 1e-12);
    assert!((last.lo - 0.751).abs() < 1e-12 && (last.hi - 0.999).abs() < 1e-12);

    let p = CodecParams::new(1, 0.01, 1).unwrap();
    let iv = codec::interval_for_group(0, &p).unwrap();
    assert!((iv.lo + 0.99).abs() < 1e-12 && (iv.hi + 0.01).abs() < 1e-12);

    let p = CodecParams::new(2, 0.01, 1).unwrap();
    let got: Vec<(f64, f64)> = codec::interval_table(&p).unwrap().iter().map(|i| (i.lo, i.hi)).collect();
    let want = [(-0.99, -0.51), (-0.49, -0.01), (0.01, 0.49), (0.51, 0.99)];
    for (g, w) in got.iter().zip(want) {
        assert!((g.0 - w.0).abs() < 1e-12 && (g.1 - w.1).abs() < 1e-12, "{got:?}");
    }
    assert!(codec::interval_for_group(4, &p).is_err());
}

#[test]
fn padding_and_single_group() {
    let p = CodecParams::new(3, 0.001, 2).unwrap();
    let noise = codec::encode(&BitString::new(), &p, &mut seed::rng(1)).unwrap();
    assert!(noise.values().iter().all(|&v| v > -0.999 && v < -0.751));

    let p = CodecParams::new(1, 0.01, 1).unwrap();
    let noise = codec::encode(&"1".parse().unwrap(), &p, &mut seed::rng(1)).unwrap();
    assert!(noise.values()[0] > 0.01 && noise.values()[0] < 0.99);
}

#[test]
fn decode_examples() {
    let p = CodecParams::new(3, 0.001, 1).unwrap();
    assert_eq!(codec::decode(&[0.3], &p).unwrap().to_string(), "101");
    assert_eq!(codec::decode(&[-0.999 + 1e-6], &p).unwrap().to_string(), "000");
    assert_eq!(codec::decode(&[1.0], &p).unwrap().to_string(), "111");
    assert_eq!(codec::decode(&[-1.0], &p).unwrap().to_string(), "000");
    assert!(matches!(codec::decode(&[1.5], &p), Err(Error::Domain(_))));
    assert!(matches!(codec::decode(&[0.0, 0.0], &p), Err(Error::Shape(_))));
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(CodecParams::new(0, 0.01, 1).is_err());
    assert!(CodecParams::new(3, 0.125, 1).is_err());
    assert!(CodecParams::new(3, 0.0, 1).is_err());
    assert!(CodecParams::new(3, 0.01, 0).is_err());
    assert!(CodecParams::new(5, 0.05, 100).is_err());
}

#[test]
fn over_capacity_is_an_error() {
    let p = CodecParams::new(3, 0.01, 100).unwrap();
    assert_eq!(p.capacity_bits(), 300);
    let msg = BitString::from_bits(vec![true; 301]);
    assert!(matches!(
        codec::encode(&msg, &p, &mut seed::rng(0)),
        Err(Error::Capacity { bits: 301, capacity: 300 })
    ));
}

#[test]
fn bit_string_conversions() {
    let b = BitString::from_hex("a5").unwrap();
    assert_eq!(b.to_string(), "10100101");
    assert_eq!(b.to_hex(), "a5");
    assert_eq!(BitString::from_bytes(&[0x0f]).to_string(), "00001111");
    assert!(BitString::from_hex("zz").is_err());
    assert!("102".parse::<BitString>().is_err());
}
