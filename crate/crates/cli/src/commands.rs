use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use avprune::exec::{try_map_indexed, with_workers, Execution};
use avprune::formats::{load_tensor, save_tensor, Tensor};
use avprune::harness::{
    dump_attention, layer_tensor_path, load_layer_map, run_with_injected_attention, run_with_pruning,
    PruneTrace, ToyDecoder,
};
use avprune::metrics::{
    cost_model, mean, modality_submap, pair_cosines, percentile, retention_per_modality, top20_recall,
    Histogram, PairKind, RecallMode,
};
use avprune::numerics::{pca2, Rng};
use avprune::schedule::{calibrate_p_final, retention_trace, PruneScheduleConfig, ScheduleKind};
use avprune::sequence::{build_sequence, ChunkSpec, Modality, TokenMeta};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::{Command, KindArg, Metric, Pairs};

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Calibrate { target, r0, layers, beta, t_mid, p_init, kind } => {
            calibrate(target, r0, layers, beta, t_mid, p_init, kind)
        }
        Command::Schedule { config, set, r0, out } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &set)?;
            emit(out.as_deref(), &schedule_csv(&cfg, r0)?)
        }
        Command::Simulate { config, set, out, dump_attention, inject, seeds } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &set)?;
            simulate(&cfg, &out, dump_attention, inject.as_deref(), seeds)
        }
        Command::Analyze {
            metric,
            trace,
            embeddings,
            layout,
            attention,
            pairs,
            sample_cap,
            seed,
            per_row,
            out,
        } => {
            let report = match metric {
                Metric::Retention => analyze_retention(need(trace, "--trace")?)?,
                Metric::Recall => {
                    let mode = if per_row { RecallMode::PerRow } else { RecallMode::Flatten };
                    analyze_recall(&need(attention, "--attention")?, layout.as_deref(), mode)?
                }
                Metric::Cosine => analyze_cosine(
                    &need(embeddings, "--embeddings")?,
                    &need(layout, "--layout")?,
                    pairs,
                    sample_cap,
                    seed,
                )?,
                Metric::Pca => analyze_pca(&need(embeddings, "--embeddings")?, &need(layout, "--layout")?)?,
            };
            emit(out.as_deref(), &report)
        }
        Command::Cost { trace, d, bytes, csv, out } => cost(&trace, d, &bytes, csv.as_deref(), out.as_deref()),
    }
}

fn need(p: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    p.ok_or_else(|| CliError::Config(format!("this metric requires {flag}")))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn calibrate(
    target: f64,
    r0: f64,
    layers: usize,
    beta: f64,
    t_mid: f64,
    p_init: f64,
    kind: KindArg,
) -> Result<(), CliError> {
    let shape = PruneScheduleConfig {
        p_init,
        p_final: p_init,
        t_mid,
        beta,
        layers,
        kind: match kind {
            KindArg::Sigmoid => ScheduleKind::Sigmoid,
            KindArg::Exponential => ScheduleKind::Exponential,
        },
    };
    let c = calibrate_p_final(target, r0, &shape)?;
    let closed = c.closed_form.map_or_else(|| "n/a".to_string(), |p| format!("{p:.7}"));
    emit(
        None,
        &format!(
            "closed_form_p_final={closed}\nbisection_p_final={:.7}\nachieved_mean={:.7}\n",
            c.bisection, c.achieved_mean
        ),
    )
}

pub fn schedule_csv(cfg: &ExperimentConfig, r0: f64) -> Result<String, CliError> {
    if !(r0 > 0.0 && r0 <= 1.0) {
        return Err(CliError::Config(format!("--r0 {r0} must be in (0, 1]")));
    }
    let sched = cfg.schedule_config();
    let trace = retention_trace(&sched, r0)?;
    let mut s = format!("# config_digest={}\nlayer,p_l,r_l\n", cfg.digest());
    for l in 0..sched.layers {
        let p = avprune::schedule::prune_ratio(l, &sched)?;
        writeln!(s, "{l},{p},{}", trace.r[l]).unwrap();
    }
    writeln!(s, "# mean_retention={}", trace.mean()).unwrap();
    Ok(s)
}

fn simulate(
    cfg: &ExperimentConfig,
    out: &Path,
    dump: bool,
    inject: Option<&Path>,
    seeds: usize,
) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    if seeds > 1 && inject.is_some() {
        return Err(CliError::Config("--inject replays one run and cannot be combined with --seeds".into()));
    }
    if let Some(dir) = inject {
        if !layer_tensor_path(dir, 0).exists() {
            return Err(CliError::Schema(format!("{} holds no attention dump", dir.display())));
        }
    }
    let base = cfg.sequence.seed;
    if seeds == 1 {
        let digest = simulate_one(cfg, base, out, dump, inject)?;
        println!("digest={digest}");
        return Ok(());
    }
    let digests = with_workers(cfg.workers, || {
        try_map_indexed(Execution::Parallel, seeds, |i| {
            let seed = base.wrapping_add(i as u64);
            simulate_one(cfg, seed, &out.join(format!("seed_{i:03}")), dump, None)
        })
    })?;
    for (i, d) in digests.iter().enumerate() {
        println!("seed={} dir=seed_{i:03} digest={d}", base.wrapping_add(i as u64));
    }
    Ok(())
}

/// One run writing into `dir`; returns the trace digest.
fn simulate_one(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    dump: bool,
    inject: Option<&Path>,
) -> Result<String, CliError> {
    let s = &cfg.sequence;
    let seq = build_sequence(s.sys_len, &ChunkSpec::uniform(s.m, s.n_v, s.n_a), s.query_len, s.d, seed)?;
    let pipeline = cfg.pipeline(seed);
    let output = match inject {
        Some(src) => run_with_injected_attention(&seq, src, &pipeline).map_err(CliError::input)?,
        None => {
            let m = &cfg.model;
            let model = ToyDecoder::new(m.layers, m.heads, m.d, m.seed)?;
            run_with_pruning(&seq, &model, &pipeline)?
        }
    };

    let mut run_cfg = cfg.clone();
    run_cfg.sequence.seed = seed;
    let cfg_digest = run_cfg.digest();

    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let trace = &output.trace;
    let digest = avprune::harness::format_digest(trace.digest());

    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf, Some(&cfg_digest))?;
    write_file(&dir.join("trace.jsonl"), buf)?;

    let series = retention_per_modality(trace);
    let mut csv = format!("# config_digest={cfg_digest}\nlayer,n_audio,n_video,n_text,audio_ratio,video_ratio\n");
    for (l, r) in trace.layers.iter().enumerate() {
        writeln!(csv, "{l},{},{},{},{},{}", r.n_audio, r.n_video, r.n_text, series.audio[l], series.video[l]).unwrap();
    }
    write_file(&dir.join("retention.csv"), csv)?;

    let mut layout = serde_json::to_string(&json!({ "config_digest": cfg_digest, "d": seq.dim() })).unwrap();
    layout.push('\n');
    for t in seq.tokens() {
        layout.push_str(&serde_json::to_string(t).unwrap());
        layout.push('\n');
    }
    write_file(&dir.join("sequence.jsonl"), layout)?;
    save_tensor(dir.join("embeddings.omtn"), &Tensor::from_matrix(seq.embeddings()))
        .map_err(|e| CliError::Io(e.to_string()))?;

    let mut files = vec!["trace.jsonl", "retention.csv", "sequence.jsonl", "embeddings.omtn"];
    if dump {
        let adir = dir.join("attention");
        dump_attention(&adir, &output.maps).map_err(|e| CliError::Io(e.to_string()))?;
        let manifest = json!({ "config_digest": cfg_digest, "layers": output.maps.len() });
        write_file(&adir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
        files.push("attention/");
    }
    let manifest = json!({
        "config_digest": cfg_digest,
        "trace_digest": digest,
        "seed": seed,
        "injected": inject.is_some(),
        "files": files,
        "config": run_cfg,
    });
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
    Ok(digest)
}

fn open_input(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Schema(format!("cannot open {}: {e}", path.display())))
}

fn read_trace(path: &Path) -> Result<(PruneTrace, Option<String>), CliError> {
    let trace = PruneTrace::read_jsonl(open_input(path)?).map_err(CliError::input)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Schema(e.to_string()))?;
    let cfg = text
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<Value>(l).ok())
        .and_then(|v| v.get("config_digest").and_then(Value::as_str).map(str::to_owned));
    Ok((trace, cfg))
}

/// Tokens of a layout file plus the config digest from its header, if any.
pub fn read_layout(path: &Path) -> Result<(Vec<TokenMeta>, Option<String>), CliError> {
    let mut tokens = Vec::new();
    let mut digest = None;
    for (n, line) in open_input(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::Schema(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| CliError::Schema(format!("{} line {}: {e}", path.display(), n + 1)))?;
        if let Some(d) = v.get("config_digest") {
            digest = d.as_str().map(str::to_owned);
            continue;
        }
        let t: TokenMeta = serde_json::from_value(v)
            .map_err(|e| CliError::Schema(format!("{} line {}: {e}", path.display(), n + 1)))?;
        if tokens.last().is_some_and(|p: &TokenMeta| p.id >= t.id) {
            return Err(CliError::Schema(format!("{} line {}: ids must increase", path.display(), n + 1)));
        }
        tokens.push(t);
    }
    Ok((tokens, digest))
}

fn header(digest: Option<&str>) -> String {
    match digest {
        Some(d) => format!("# config_digest={d}\n"),
        None => "# config_digest=unknown\n".to_string(),
    }
}

fn analyze_retention(path: PathBuf) -> Result<String, CliError> {
    let (trace, digest) = read_trace(&path)?;
    let s = retention_per_modality(&trace);
    let mut out = header(digest.as_deref());
    out.push_str("layer,audio,video\n");
    for l in 0..s.audio.len() {
        writeln!(out, "{l},{},{}", s.audio[l], s.video[l]).unwrap();
    }
    Ok(out)
}

fn analyze_recall(dir: &Path, layout: Option<&Path>, mode: RecallMode) -> Result<String, CliError> {
    let manifest_digest = fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v.get("config_digest").and_then(Value::as_str).map(str::to_owned));
    let (tokens, layout_digest) = match layout {
        Some(p) => {
            let (t, d) = read_layout(p)?;
            (Some(t), d)
        }
        None => (None, None),
    };

    let mut maps = Vec::new();
    while layer_tensor_path(dir, maps.len()).exists() {
        maps.push(load_layer_map(dir, maps.len()).map_err(CliError::input)?);
    }
    if maps.is_empty() {
        return Err(CliError::Schema(format!("{} holds no attention dump", dir.display())));
    }

    let mut out = header(manifest_digest.or(layout_digest).as_deref());
    out.push_str("layer,modality,recall\n");
    let mut computed = 0;
    let mut cell = |out: &mut String, l: usize, name: &str, map: &avprune::importance::AttentionMap| {
        match top20_recall(map, mode) {
            Ok(r) => {
                computed += 1;
                writeln!(out, "{l},{name},{r}").unwrap();
            }
            // No columns left or no attention mass: recall is undefined.
            Err(_) => writeln!(out, "{l},{name},").unwrap(),
        }
    };
    for (l, map) in maps.iter().enumerate() {
        match &tokens {
            Some(tokens) => {
                for (name, m) in [("audio", Modality::Audio), ("video", Modality::Video)] {
                    cell(&mut out, l, name, &modality_submap(map, tokens, m, false));
                }
            }
            None => cell(&mut out, l, "all", map),
        }
    }
    if computed == 0 {
        return Err(CliError::Schema("attention maps carry no mass".into()));
    }
    Ok(out)
}

fn load_embeddings(emb: &Path, layout: &Path) -> Result<(avprune::Matrix, Vec<TokenMeta>, Option<String>), CliError> {
    let m = load_tensor(emb)
        .and_then(|t| t.into_matrix())
        .map_err(CliError::input)?;
    let (tokens, digest) = read_layout(layout)?;
    if tokens.len() != m.rows() {
        return Err(CliError::Schema(format!(
            "layout lists {} tokens but embeddings have {} rows",
            tokens.len(),
            m.rows()
        )));
    }
    Ok((m, tokens, digest))
}

fn analyze_cosine(emb: &Path, layout: &Path, pairs: Pairs, cap: usize, seed: u64) -> Result<String, CliError> {
    let (m, tokens, digest) = load_embeddings(emb, layout)?;
    let tags: Vec<Modality> = tokens.iter().map(|t| t.modality).collect();
    let (kind, name) = match pairs {
        Pairs::Aa => (PairKind::AA, "AA"),
        Pairs::Vv => (PairKind::VV, "VV"),
        Pairs::Av => (PairKind::AV, "AV"),
    };
    let values = pair_cosines(&m, &tags, kind, cap, &mut Rng::new(seed), Execution::Parallel)?;
    let hist = Histogram::from_values(&values);
    let mut out = header(digest.as_deref());
    writeln!(
        out,
        "# pairs={name} used={} mean={} p95={}",
        values.len(),
        mean(&values).unwrap_or(f64::NAN),
        percentile(&values, 0.95).unwrap_or(f64::NAN)
    )
    .unwrap();
    out.push_str("bin_lo,bin_hi,count\n");
    for (i, c) in hist.counts.iter().enumerate() {
        let (lo, hi) = Histogram::bin_range(i);
        writeln!(out, "{lo:.2},{hi:.2},{c}").unwrap();
    }
    Ok(out)
}

fn analyze_pca(emb: &Path, layout: &Path) -> Result<String, CliError> {
    let (m, tokens, digest) = load_embeddings(emb, layout)?;
    let p = pca2(&m).map_err(CliError::input)?;
    let mut out = header(digest.as_deref());
    writeln!(out, "# eigenvalues={},{}", p.eigenvalues[0], p.eigenvalues[1]).unwrap();
    out.push_str("id,modality,pc1,pc2\n");
    for (t, xy) in tokens.iter().zip(&p.projection) {
        let modality = serde_json::to_value(t.modality).unwrap();
        writeln!(out, "{},{},{},{}", t.id, modality.as_str().unwrap_or(""), xy[0], xy[1]).unwrap();
    }
    Ok(out)
}

fn cost(trace: &Path, d: usize, bytes: &str, csv: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    if d == 0 {
        return Err(CliError::Config("--d must be >= 1".into()));
    }
    let bytes: usize = bytes.parse().map_err(|_| CliError::Config("--bytes must be 2 or 4".into()))?;
    let (trace, digest) = read_trace(trace)?;
    let report = cost_model(&trace, d, bytes);
    let mut value = serde_json::to_value(&report).unwrap();
    value["config_digest"] = digest.clone().map_or(Value::Null, Value::String);
    if let Some(path) = csv {
        let mut s = header(digest.as_deref());
        s.push_str("layer,tokens,projection_flops,attention_flops,kv_bytes\n");
        for c in &report.layers {
            writeln!(s, "{},{},{},{},{}", c.layer, c.tokens, c.projection_flops, c.attention_flops, c.kv_bytes).unwrap();
        }
        write_file(path, s)?;
    }
    emit(out, &(serde_json::to_string_pretty(&value).unwrap() + "\n"))
}
