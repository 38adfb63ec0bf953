mod common;

use std::panic::catch_unwind;

use lig::io::{decode_model, encode_model};
use lig::{CovUT, Gaussian2D, GaussianCloud, Level, LogModel};
use rand::Rng;

fn sample_model() -> LogModel {
    let mut r = common::rng(2);
    let mut cloud = |n: usize| {
        let mut c = GaussianCloud::new(3);
        for _ in 0..n {
            c.push(Gaussian2D::new(
                [r.gen_range(0.0..16.0f32), r.gen_range(0.0..16.0)],
                CovUT::new(2.0, 0.3, 1.5),
                vec![r.gen(), r.gen(), r.gen()],
            ))
            .unwrap();
        }
        c
    };
    LogModel {
        full_w: 16,
        full_h: 16,
        channels: 3,
        coarse: Some(Level { width: 4, height: 4, cloud: cloud(2) }),
        fine: Level { width: 16, height: 16, cloud: cloud(6) },
        res_min: -0.25,
        res_max: 0.5,
    }
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = encode_model(&sample_model()).unwrap();
    for len in 0..bytes.len() {
        let res = catch_unwind(|| decode_model(&bytes[..len]));
        assert!(matches!(res, Ok(Err(_))), "prefix of {len} bytes");
    }
}

#[test]
fn garbage_and_mutations_never_panic() {
    let good = encode_model(&sample_model()).unwrap();
    let mut r = common::rng(77);
    for case in 0..2000 {
        let bytes: Vec<u8> = if case % 2 == 0 {
            let len = r.gen_range(0..200);
            (0..len).map(|_| r.gen()).collect()
        } else {
            let mut b = good.clone();
            for _ in 0..r.gen_range(1..6) {
                let i = r.gen_range(0..b.len());
                b[i] = r.gen();
            }
            b
        };
        let res = catch_unwind(|| decode_model(&bytes));
        assert!(res.is_ok(), "panic on case {case}");
        if case % 2 == 0 && !bytes.starts_with(b"LIG1") {
            assert!(res.unwrap().is_err());
        }
    }
}
