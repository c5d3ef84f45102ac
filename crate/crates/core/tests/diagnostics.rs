use avprune::exec::Execution;
use avprune::harness::{run_with_pruning, PipelineConfig, ToyDecoder};
use avprune::importance::{SelectorKind, TdsConfig};
use avprune::intra::{apply_intra_synthetic, IntraConfig};
use avprune::metrics::{cost_model, mean, pair_cosines, percentile, retention_per_modality, PairKind};
use avprune::numerics::{pca2, Rng};
use avprune::schedule::PruneScheduleConfig;
use avprune::sequence::{build_sequence, ChunkSpec, Modality};

#[test]
fn synthetic_modalities_are_separated() {
    // About 1,000 audiovisual tokens with the default generator.
    let seq = build_sequence(4, &ChunkSpec::uniform(3, 288, 50), 8, 64, 2024).unwrap();
    let tags: Vec<Modality> = seq.tokens().iter().map(|t| t.modality).collect();
    let emb = seq.embeddings();
    let cosines = |kind| pair_cosines(emb, &tags, kind, 20_000, &mut Rng::new(1), Execution::Parallel).unwrap();
    let av = cosines(PairKind::AV);
    let aa = cosines(PairKind::AA);
    let vv = cosines(PairKind::VV);
    let p95 = percentile(&av, 0.95).unwrap();
    assert!(p95 < 0.3, "cross-modal p95 {p95}");
    let cross = mean(&av).unwrap();
    assert!(mean(&aa).unwrap() > cross);
    assert!(mean(&vv).unwrap() > cross);
}

#[test]
fn pca_separates_audio_from_video() {
    let seq = build_sequence(0, &ChunkSpec::uniform(2, 40, 40), 1, 24, 3).unwrap();
    let p = pca2(seq.embeddings()).unwrap();
    assert!(p.eigenvalues[0] >= p.eigenvalues[1] && p.eigenvalues[1] >= 0.0);
    let tags: Vec<Modality> = seq.tokens().iter().map(|t| t.modality).collect();
    let centroid = |m| {
        let xs: Vec<f64> = (0..tags.len()).filter(|&i| tags[i] == m).map(|i| p.projection[i][0]).collect();
        mean(&xs).unwrap()
    };
    assert!((centroid(Modality::Audio) - centroid(Modality::Video)).abs() > 0.5);
}

#[test]
fn default_intra_retention() {
    let seq = build_sequence(0, &ChunkSpec::uniform(2, 288, 50), 1, 16, 4).unwrap();
    let (after, report) = apply_intra_synthetic(&seq, &IntraConfig::default(), 1).unwrap();
    assert_eq!(report.audio_retained, 70);
    assert_eq!(report.video_retained, 2 * (72 + 216 - 173));
    assert!((report.combined_retention() - 0.444).abs() <= 0.002);
    assert_eq!(after.audiovisual_count(), report.audio_retained + report.video_retained);
}

#[test]
fn cost_of_simulated_run_is_below_baseline() {
    let seq = build_sequence(2, &ChunkSpec::uniform(2, 24, 8), 4, 32, 6).unwrap();
    let model = ToyDecoder::new(8, 4, 32, 6).unwrap();
    let cfg = PipelineConfig::new(
        PruneScheduleConfig::sigmoid(0.0, 0.3, 0.5, 20.0, 8),
        TdsConfig { lambda_div: 0.2, start_layer: 4 },
        SelectorKind::Tds,
    );
    let trace = run_with_pruning(&seq, &model, &cfg).unwrap().trace;
    assert!(trace.total_pruned() > 0);
    let report = cost_model(&trace, 32, 2);
    assert!(report.total_flops < report.baseline_flops);
    assert!(report.kv_bytes < report.baseline_kv_bytes);
    assert!(report.flops_ratio > 0.0 && report.flops_ratio < 1.0);

    let s = retention_per_modality(&trace);
    assert_eq!(s.audio[0], 1.0);
    assert!(s.audio.windows(2).all(|w| w[1] <= w[0]));
    assert!(s.video.windows(2).all(|w| w[1] <= w[0]));

    let zero = PipelineConfig::new(PruneScheduleConfig::zero(8), TdsConfig::default(), SelectorKind::Plain);
    let flat = run_with_pruning(&seq, &model, &zero).unwrap().trace;
    let r = cost_model(&flat, 32, 2);
    assert_eq!(r.flops_ratio, 1.0);
    assert_eq!(r.total_flops, r.baseline_flops);
    let s = retention_per_modality(&flat);
    assert!(s.audio.iter().chain(&s.video).all(|&x| x == 1.0));
}
