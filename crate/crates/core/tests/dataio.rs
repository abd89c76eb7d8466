use seqrep::dataio::format::{load_dataset, save_dataset};
use seqrep::dataio::{gen_synthetic, Dataset, SynthConfig};
use seqrep::Tensor;

fn quantized(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for u in &mut out.utterances {
        u.frames = u.frames.map(|v| v as f32 as f64);
        if let Some(v2) = &u.view2 {
            u.view2 = Some(v2.map(|v| v as f32 as f64));
        }
    }
    out
}

#[test]
fn saved_datasets_load_back() {
    let cfg = SynthConfig {
        n_utterances: 5,
        view2_dim: 2,
        n_speakers: 2,
        ..SynthConfig::default()
    };
    let ds = gen_synthetic(&cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back, quantized(&ds));
    let again = load_dataset(dir.path()).unwrap();
    assert_eq!(again, back);
}

#[test]
fn saving_twice_is_byte_identical() {
    let ds = gen_synthetic(&SynthConfig::default(), 2).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(a.path(), &ds).unwrap();
    save_dataset(b.path(), &ds).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }
}

#[test]
fn missing_feature_file_names_the_path() {
    let ds = gen_synthetic(&SynthConfig { n_utterances: 2, ..SynthConfig::default() }, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let victim = format!("{}.srf", ds.utterances[1].id);
    std::fs::remove_file(dir.path().join(&victim)).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&victim), "{err}");
}

/// Nearest-class-mean probe fitted on half the data. Frames carry enough
/// state information to beat chance by a wide margin.
#[test]
fn a_simple_probe_beats_chance() {
    let cfg = SynthConfig {
        n_utterances: 200,
        ..SynthConfig::default()
    };
    let ds = gen_synthetic(&cfg, 4).unwrap();
    let (fit, test) = ds.split_at(100);
    let k = cfg.n_states;
    let mut means = Tensor::zeros(k, cfg.dim);
    let mut counts = vec![0.0; k];
    for u in &fit.utterances {
        for (t, &l) in u.labels.as_ref().unwrap().iter().enumerate() {
            counts[l] += 1.0;
            for (m, x) in means.row_slice_mut(l).iter_mut().zip(u.frames.row_slice(t)) {
                *m += x;
            }
        }
    }
    for (l, c) in counts.iter().enumerate() {
        means.row_slice_mut(l).iter_mut().for_each(|m| *m /= c);
    }
    let (mut right, mut total) = (0usize, 0usize);
    for u in &test.utterances {
        for (t, &l) in u.labels.as_ref().unwrap().iter().enumerate() {
            let x = u.frames.row_slice(t);
            let dist = |c: usize| -> f64 { means.row_slice(c).iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum() };
            let best = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            right += usize::from(best == l);
            total += 1;
        }
    }
    assert!(right as f64 / total as f64 > 1.0 / k as f64 + 0.1);
}
