use super::*;
use crate::corpus::test_support::{spec, tiny_corpus};
use crate::corpus::{partition_speakers, SpeakerPartition};
use crate::signal::{apply_mask, Stft, NUM_BINS, WINDOW_SIZE};
use crate::signal::RatioMask;

fn partition() -> SpeakerPartition<f64> {
    partition_speakers(&tiny_corpus(3, 8, 6), &spec(&["spk0", "spk1"], 0.0, 2)).unwrap()
}

fn protocol() -> EvalProtocol {
    EvalProtocol {
        n_mixtures: 12,
        clip_sec: 0.5,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn identity_model_scores_zero() {
    let p = partition();
    let set = EvalSet::build("spk0", &p.speaker("spk0").unwrap().held_out, &p.noise_test, &protocol()).unwrap();
    let (stats, values) = set.score_with(|x, _| Ok(x.clone())).unwrap();
    assert_eq!(stats.n_mixtures, 12);
    assert!(stats.mean_sisdri_db.abs() < 1e-6);
    assert!(values.iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn oracle_mask_improves() {
    let p = partition();
    let set = EvalSet::build("spk1", &p.speaker("spk1").unwrap().held_out, &p.noise_test, &protocol()).unwrap();
    let stft = Stft::<f64>::new(WINDOW_SIZE);
    let (stats, _) = set
        .score_with(|x, s| {
            let xs = stft.stft(x)?;
            let ss = stft.stft(s)?;
            let values = ss
                .frames
                .iter()
                .zip(&xs.frames)
                .map(|(a, b)| (a.norm() / b.norm().max(1e-12)).min(1.0))
                .collect();
            let mask = RatioMask {
                values,
                num_frames: xs.num_frames,
                num_bins: NUM_BINS,
            };
            stft.istft(&apply_mask(&xs, &mask)?, x.len())
        })
        .unwrap();
    assert!(stats.mean_sisdri_db > 0.0, "{stats:?}");
}

#[test]
fn eval_sets_are_frozen_and_use_test_noise_only() {
    let p = partition();
    let held = &p.speaker("spk0").unwrap().held_out;
    let a = EvalSet::build("spk0", held, &p.noise_test, &protocol()).unwrap();
    let b = EvalSet::build("spk0", held, &p.noise_test, &protocol()).unwrap();
    assert!(a.mixtures().zip(b.mixtures()).all(|(x, y)| x == y));
    let test_ids: BTreeSet<String> = p.noise_test.ids().into_iter().collect();
    assert!(a.noise_ids().is_subset(&test_ids));
    check_noise_disjoint(&p.noise_test, &[&p.noise_train, &p.noise_premix]).unwrap();
    assert!(check_noise_disjoint(&p.noise_test, &[&p.noise_test]).is_err());
    let empty = ClipSet::new(Vec::new());
    assert!(EvalSet::build("spk0", held, &empty, &protocol()).is_err());
}

fn report(spk: &str, scheme: &str, budget: f64, mean: f64, seed: u64) -> SpeakerReport {
    SpeakerReport {
        speaker_id: spk.into(),
        train_seed: seed,
        key: GridKey {
            architecture: "gru-64".into(),
            scheme: scheme.into(),
            premix_snr_db: if scheme == "cm" { Some(10.0) } else { None },
            ft_budget_sec: budget,
        },
        protocol: protocol(),
        stats: SpeakerStats {
            mean_sisdri_db: mean,
            std_sisdri_db: 1.0,
            n_mixtures: 12,
        },
    }
}

#[test]
fn single_speaker_cell_equals_its_stats() {
    let g = aggregate_grid(&[report("a", "cm", 3.0, 4.5, 0)]).unwrap();
    let c = g.cell("gru-64", "cm", Some(10.0), 3.0).unwrap();
    assert_eq!(c.mean_sisdri_db, 4.5);
    assert_eq!(c.std_sisdri_db, 0.0);
    assert_eq!(c.speakers["a"], report("a", "cm", 3.0, 4.5, 0).stats);
}

#[test]
fn aggregation_matches_brute_force_and_ignores_order() {
    let values = [3.1, 5.7, 4.4];
    let mut rs: Vec<SpeakerReport> = ["s1", "s2", "s3"]
        .iter()
        .zip(values)
        .map(|(s, v)| report(s, "pseudose", 0.0, v, 0))
        .collect();
    rs.push(report("s1", "multispeaker", 3.0, 1.0, 0));
    let g = aggregate_grid(&rs).unwrap();
    let mean = values.iter().sum::<f64>() / 3.0;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let c = g.cell("gru-64", "pseudose", None, 0.0).unwrap();
    assert!((c.mean_sisdri_db - mean).abs() < 1e-12);
    assert!((c.std_sisdri_db - std).abs() < 1e-12);
    rs.reverse();
    assert_eq!(aggregate_grid(&rs).unwrap(), g);
}

#[test]
fn seeds_are_averaged_per_speaker() {
    let rs = vec![report("a", "cm", 3.0, 2.0, 0), report("a", "cm", 3.0, 4.0, 1), report("b", "cm", 3.0, 6.0, 0)];
    let c = aggregate_grid(&rs).unwrap().cells[0].clone();
    assert_eq!(c.speakers["a"].mean_sisdri_db, 3.0);
    assert_eq!(c.mean_sisdri_db, 4.5);
    assert_eq!(c.n_seeds, 2);
}

#[test]
fn mismatched_protocols_are_rejected() {
    let mut b = report("b", "cm", 3.0, 1.0, 0);
    b.protocol.n_mixtures = 50;
    assert!(matches!(aggregate_grid(&[report("a", "cm", 3.0, 1.0, 0), b]), Err(Error::ProtocolMismatch(_))));
    assert!(aggregate_grid(&[]).is_err());
    let dup = [report("a", "cm", 3.0, 1.0, 0), report("a", "cm", 3.0, 2.0, 0)];
    assert!(aggregate_grid(&dup).is_err());
}

#[test]
fn merging_is_order_invariant() {
    let r1 = aggregate_grid(&[report("a", "cm", 3.0, 1.0, 0)]).unwrap();
    let r2 = aggregate_grid(&[report("b", "cm", 3.0, 2.0, 0), report("b", "cm", 0.0, 0.5, 0)]).unwrap();
    assert_eq!(merge_reports(&[r1.clone()]).unwrap(), r1);
    assert_eq!(merge_reports(&[r1.clone(), r2.clone()]).unwrap(), merge_reports(&[r2, r1]).unwrap());
}

#[test]
fn emitted_files_follow_the_table_conventions() {
    let mut rs = Vec::new();
    for (i, b) in [0.0, 3.0, 5.0].into_iter().enumerate() {
        rs.push(report("a", "cm", b, 9.0 + i as f64, 0));
        rs.push(report("b", "cm", b, 9.4 + i as f64, 0));
        rs.push(report("a", "random-init", b, 1.0 + i as f64, 0));
    }
    let g = aggregate_grid(&rs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&g, dir.path(), &ReportFormat::ALL).unwrap();
    for f in &files {
        assert!(std::fs::metadata(f).unwrap().len() > 0, "{f:?}");
    }
    assert!(files.iter().any(|f| f.ends_with("curves_gru-64.svg")));
    assert_eq!(load_report(&dir.path().join("report.json")).unwrap(), g);

    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "Architecture,Initialization,0 s,3 s,5 s,10 s,30 s,60 s");
    assert_eq!(lines[1], "gru-64,Random init,1.00 (0.000),2.00 (0.000),3.00 (0.000),-,-,-");
    assert_eq!(lines[2], "gru-64,CM (10 dB),9.20 (0.200),10.20 (0.200),11.20 (0.200),-,-,-");
    assert_eq!(format_cell(9.2, 0.721), "9.20 (0.721)");
    let text = render_text(&g);
    assert!(text.contains("CM (10 dB)"));
    assert!(text.contains("9.20 (0.200)"));
}
