use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use gda_core::csi::{
    decode_csid, encode_csid, export_csv, import_csv, read_csid, synth_csi, write_csid, Complex, ConditionLabel,
    CsiDims, CsiRecording, GestureSim, GestureTemplate, Origin,
};
use gda_core::manifest::{split_dataset, DatasetManifest, ManifestEntry, Vocab};
use proptest::prelude::*;

fn sim(template: GestureTemplate) -> GestureSim {
    GestureSim {
        template,
        duration_s: 1.0,
        f0_hz: 20.0,
        a_static: 1.0,
        a_dyn: 0.4,
        noise_sigma: 0.0,
        condition: ConditionLabel {
            gesture: 3,
            location: 1,
            orientation: 2,
            user: 0,
            room: 0,
        },
    }
}

#[test]
fn static_only_csi_is_time_constant() {
    let mut s = sim(GestureTemplate::Zigzag);
    s.a_dyn = 0.0;
    let dims = CsiDims {
        frames: 40,
        subcarriers: 5,
        antennas: 3,
    };
    let rec = synth_csi(&s, 1000.0, dims, 1).unwrap();
    for t in 1..40 {
        for sc in 0..5 {
            for a in 0..3 {
                assert_eq!(rec.get(t, sc, a), rec.get(0, sc, a));
            }
        }
    }
}

#[test]
fn slide_phase_is_linear_at_doppler_rate() {
    let mut s = sim(GestureTemplate::Slide);
    s.a_static = 0.0;
    let dims = CsiDims {
        frames: 500,
        subcarriers: 2,
        antennas: 2,
    };
    let rec = synth_csi(&s, 1000.0, dims, 4).unwrap();
    let mut unwrapped = vec![rec.get(0, 0, 0).arg()];
    for t in 1..500 {
        let mut d = rec.get(t, 0, 0).arg() - rec.get(t - 1, 0, 0).arg();
        d -= 2.0 * PI * (d / (2.0 * PI)).round();
        unwrapped.push(unwrapped[t - 1] + d);
    }
    let slope = 2.0 * PI * 20.0 / 1000.0;
    for (t, p) in unwrapped.iter().enumerate() {
        assert!((p - unwrapped[0] - slope * t as f64).abs() < 1e-9, "t={t}");
    }
}

#[test]
fn synthesis_is_bitwise_deterministic() {
    let mut s = sim(GestureTemplate::Circle);
    s.noise_sigma = 0.1;
    let a = synth_csi(&s, 1000.0, CsiDims::default(), 42).unwrap();
    let b = synth_csi(&s, 1000.0, CsiDims::default(), 42).unwrap();
    assert_eq!(encode_csid(&a), encode_csid(&b));
    let c = synth_csi(&s, 1000.0, CsiDims::default(), 43).unwrap();
    assert_ne!(encode_csid(&a), encode_csid(&c));
}

#[test]
fn csid_file_size_and_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csid");
    let dims = CsiDims {
        frames: 100,
        subcarriers: 30,
        antennas: 3,
    };
    let rec = synth_csi(&sim(GestureTemplate::Sweep), 1000.0, dims, 2).unwrap();
    write_csid(&rec, &path).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 64 + 100 * 30 * 3 * 16);
    assert_eq!(read_csid(&path).unwrap(), rec);
    let mut bytes = fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_csid(&path), Err(gda_core::Error::BadMagic { .. })));
}

fn entry(path: &str) -> ManifestEntry {
    ManifestEntry {
        path: path.into(),
        condition: ConditionLabel::default(),
        origin: Origin::Real,
    }
}

#[test]
fn csv_import_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    fs::write(&path, "t,s,a,re,im\n1,0,0,0,1\n0,0,0,1,0\n").unwrap();
    let rec = import_csv(&path, &entry("x.csv"), 1000.0).unwrap();
    assert_eq!(
        rec.dims(),
        CsiDims {
            frames: 2,
            subcarriers: 1,
            antennas: 1
        }
    );
    assert_eq!(rec.samples(), &[Complex::new(1.0, 0.0), Complex::new(0.0, 1.0)]);
    fs::write(&path, "t,s,a,re,im\n0,0,0,1,0\n0,0,0,0,1\n1,0,0,0,1\n").unwrap();
    assert!(import_csv(&path, &entry("x.csv"), 1000.0).is_err());
    fs::write(&path, "t,s,a,re,im\n0,0,0,1,0\n1,0,1,0,1\n").unwrap();
    assert!(import_csv(&path, &entry("x.csv"), 1000.0).is_err());
    fs::write(&path, "t,s,a,re,im\n0,0,0,1\n1,0,0,0,1\n").unwrap();
    assert!(import_csv(&path, &entry("x.csv"), 1000.0).is_err());
}

#[test]
fn csv_export_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let mut s = sim(GestureTemplate::Clap);
    s.noise_sigma = 0.3;
    let dims = CsiDims {
        frames: 20,
        subcarriers: 3,
        antennas: 2,
    };
    let rec = synth_csi(&s, 1000.0, dims, 8).unwrap();
    export_csv(&rec, &path).unwrap();
    let back = import_csv(
        &path,
        &ManifestEntry {
            condition: rec.condition,
            ..entry("r.csv")
        },
        1000.0,
    )
    .unwrap();
    for (a, b) in rec.samples().iter().zip(back.samples()) {
        assert_eq!(a.re.to_bits(), b.re.to_bits());
        assert_eq!(a.im.to_bits(), b.im.to_bits());
    }
}

fn manifest(counts: &[usize]) -> DatasetManifest {
    let mut m = DatasetManifest::new(1000.0, Vocab::default());
    for (g, &n) in counts.iter().enumerate() {
        for i in 0..n {
            m.entries.push(ManifestEntry {
                path: format!("g{g}_{i}.dfss"),
                condition: ConditionLabel {
                    gesture: g as u16,
                    ..Default::default()
                },
                origin: Origin::Real,
            });
        }
    }
    m
}

#[test]
fn split_eighty_twenty() {
    let m = manifest(&[10; 6]);
    let (train, test) = split_dataset(&m, 0.8, 42).unwrap();
    for g in 0..6 {
        assert_eq!(train.entries.iter().filter(|e| e.condition.gesture == g).count(), 8);
        assert_eq!(test.entries.iter().filter(|e| e.condition.gesture == g).count(), 2);
    }
    assert_eq!(split_dataset(&m, 0.8, 42).unwrap(), (train, test));
    assert!(split_dataset(&manifest(&[3, 1]), 0.5, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn csid_round_trip_is_bitwise(
        t in 2usize..12, s in 1usize..5, a in 1usize..4,
        seed in any::<u64>(), fs in 1.0f64..1e5,
        cond in (0u16..100, 0u16..100, 0u16..100, 0u16..100, 0u16..100),
        synthetic in any::<bool>(),
    ) {
        let dims = CsiDims { frames: t, subcarriers: s, antennas: a };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let samples: Vec<Complex> = (0..t * s * a)
            .map(|_| Complex::new(rand::Rng::random_range(&mut rng, -1e6..1e6), rand::Rng::random_range(&mut rng, -1e-6..1e-6)))
            .collect();
        let condition = ConditionLabel { gesture: cond.0, location: cond.1, orientation: cond.2, user: cond.3, room: cond.4 };
        let origin = if synthetic { Origin::Synthetic } else { Origin::Real };
        let rec = CsiRecording::new(dims, samples, fs, condition, origin).unwrap();
        let bytes = encode_csid(&rec);
        let back = decode_csid(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(encode_csid(&back), bytes);
    }

    #[test]
    fn two_path_amplitude_bound(
        g in 0u16..6, a_s in 0.01f64..3.0, a_d in 0.01f64..3.0, f0 in 1.0f64..200.0, seed in any::<u64>(),
    ) {
        let spec = GestureSim {
            template: GestureTemplate::from_gesture_id(g).unwrap(),
            duration_s: 0.2, f0_hz: f0, a_static: a_s, a_dyn: a_d, noise_sigma: 0.0,
            condition: ConditionLabel::default(),
        };
        let dims = CsiDims { frames: 200, subcarriers: 3, antennas: 2 };
        let rec = synth_csi(&spec, 1000.0, dims, seed).unwrap();
        let (lo, hi) = ((a_s - a_d).abs(), a_s + a_d);
        for z in rec.samples() {
            prop_assert!(z.re.is_finite() && z.im.is_finite());
            let m = z.norm();
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }
        prop_assert_eq!(rec.samples().len(), 200 * 3 * 2);
    }

    #[test]
    fn split_invariants(counts in prop::collection::vec(2usize..30, 1..6), frac in 0.05f64..0.95, seed in any::<u64>()) {
        let m = manifest(&counts);
        let (train, test) = split_dataset(&m, frac, seed).unwrap();
        let tr: std::collections::HashSet<_> = train.entries.iter().map(|e| e.path.clone()).collect();
        prop_assert!(test.entries.iter().all(|e| !tr.contains(&e.path)));
        prop_assert_eq!(train.entries.len() + test.entries.len(), m.entries.len());
        for (g, &n) in counts.iter().enumerate() {
            let k = train.entries.iter().filter(|e| e.condition.gesture == g as u16).count();
            prop_assert!((k as f64 - frac * n as f64).abs() < 1.0);
        }
    }
}
