//! The seven command entry points, as library functions so the binary stays
//! a thin argument-parsing shell and tests can drive commands directly.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rga_attention::{
    apply_attention_channel, cbam_s_gate, compose, compose_count, register_compose, register_snl,
    rga_c_map, rga_s_map, snl_mask_map, spatial_affinity, AttentionConfig, ModuleKind,
};
use rga_reid::{
    backbone_forward, cmc_map, features_before_attention, gen_dataset, model_param_count,
    register_model, split_dataset, train, BackboneConfig, EmbeddingBatch, EpochTrace, EvalReport,
    ReidError, Sample,
};
use rga_tensor::{
    grad_check, jitter_params, GradCheckSettings, Mode, NodeId, ParameterSet, Session, Stream,
    StreamRng, Tensor,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::csvio::{write_csv, write_grid};
use crate::error::{CliError, Result};
use crate::pgm::write_pgm;

/// Initialisation substream key for the contrast module emitted next to
/// relation maps.
const KEY_SNL_PROBE: u64 = 900;
/// Initialisation substream keys for gradcheck and bench module instances.
const KEY_CHECK: u64 = 7000;

/// Modules timed by the benchmark, in row order.
pub const BENCH_MODULES: [ModuleKind; 7] = [
    ModuleKind::RgaS,
    ModuleKind::RgaC,
    ModuleKind::Nl,
    ModuleKind::Snl,
    ModuleKind::Se,
    ModuleKind::CbamC,
    ModuleKind::CbamS,
];

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::Failed(format!("write: {e}")))
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Configuration-driven setup failures are usage errors.
fn setup_err(e: ReidError) -> CliError {
    match e {
        ReidError::BadConfig(msg) => CliError::Usage(msg),
        other => other.into(),
    }
}

/// The module's attention settings under the run configuration: the run's
/// knobs with the kind's composition. `None` for baselines.
pub fn module_attention(cfg: &RunConfig, kind: ModuleKind) -> Option<AttentionConfig> {
    kind.attention_config().map(|base| AttentionConfig {
        composition: base.composition,
        ..cfg.attention()
    })
}

fn register_module(
    cfg: &RunConfig,
    kind: ModuleKind,
    ps: &mut ParameterSet<f64>,
    rng: &mut StreamRng,
    prefix: &str,
    c: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    match module_attention(cfg, kind) {
        Some(acfg) => register_compose(ps, rng, prefix, c, h, w, &acfg),
        None => kind.register(ps, rng, prefix, c, h, w),
    }
    .map_err(|e| usage(format!("module {kind} at ({c}, {h}, {w}): {e}")))
}

/// Weighted sum to a scalar with fixed, mostly-distinct weights so no
/// output element's gradient can hide.
fn scalarize(sess: &mut Session<f64>, y: NodeId) -> rga_tensor::Result<NodeId> {
    let numel = sess.tape.value(y).numel();
    let weights = Tensor::from_fn(&[1, numel], |i| ((i * 37 % 11) as f64) * 0.13 - 0.35);
    let w = sess.input(weights);
    let flat = sess.tape.reshape(y, &[1, numel])?;
    let mixed = sess.tape.mul(flat, w)?;
    sess.tape.mean_axis(mixed, 1)
}

fn pattern(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i * 53 % 17) as f64) * 0.11 - 0.8)
}

pub struct GradcheckOptions {
    /// Also check the full configured model on a 2-image batch.
    pub full_model: bool,
    /// Cap on probed elements per parameter tensor.
    pub max_samples: Option<usize>,
    /// Test hook: scale the named parameter's analytic gradient so the
    /// check must fail.
    pub corrupt: Option<(String, f64)>,
}

/// Finite-difference checks: the configured module (or all modules when the
/// configuration names none), plus optionally the full model. Returns
/// whether everything passed.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    opts: &GradcheckOptions,
    out: &mut dyn Write,
) -> Result<bool> {
    let kinds: Vec<ModuleKind> = match cfg.module {
        Some(kind) => vec![kind],
        None => ModuleKind::ALL.to_vec(),
    };
    let settings = GradCheckSettings {
        max_samples_per_param: opts.max_samples,
        corrupt: opts.corrupt.clone(),
        ..GradCheckSettings::default()
    };
    let (c, h, w) = (16, 4, 2);
    let mut all_pass = true;
    for (i, &kind) in kinds.iter().enumerate() {
        let mut ps = ParameterSet::<f64>::new();
        let mut rng = StreamRng::derive(cfg.seed, Stream::Init, KEY_CHECK + i as u64);
        let prefix = kind.name();
        register_module(cfg, kind, &mut ps, &mut rng, prefix, c, h, w)?;
        jitter_params(&mut ps, 0.05, &mut rng);
        let x = pattern(&[2, c, h, w]);
        let acfg = module_attention(cfg, kind);
        let report = grad_check(
            |sess, params| {
                let id = sess.input(x.clone());
                let y = match &acfg {
                    Some(acfg) => compose(sess, params, prefix, id, acfg).expect("forward"),
                    None => kind.forward(sess, params, prefix, id).expect("forward"),
                };
                scalarize(sess, y)
            },
            &ps,
            &settings,
        )?;
        emit(out, format!("== {kind} =="))?;
        for line in report.lines() {
            emit(out, line)?;
        }
        all_pass &= report.pass();
    }
    if opts.full_model {
        let bb = cfg.backbone()?;
        let mut ps = ParameterSet::<f64>::new();
        register_model(&mut ps, cfg.seed, &bb)?;
        let mut rng = StreamRng::derive(cfg.seed, Stream::Init, KEY_CHECK + 99);
        jitter_params(&mut ps, 0.05, &mut rng);
        let x = pattern(&[2, bb.in_channels, bb.in_h, bb.in_w]);
        let report = grad_check(
            |sess, params| {
                let id = sess.input(x.clone());
                let (e, l) = rga_reid::forward_graph(sess, params, &bb, id).expect("forward");
                let se = scalarize(sess, e)?;
                let sl = scalarize(sess, l)?;
                sess.tape.add(se, sl)
            },
            &ps,
            &settings,
        )?;
        emit(out, "== model ==")?;
        for line in report.lines() {
            emit(out, line)?;
        }
        all_pass &= report.pass();
    }
    emit(out, format!("gradcheck: {}", if all_pass { "PASS" } else { "FAIL" }))?;
    Ok(all_pass)
}

fn load_split(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let samples = gen_dataset(cfg.num_ids, cfg.per_id_total(), cfg.seed).map_err(setup_err)?;
    split_dataset(
        &samples,
        cfg.per_id_total(),
        cfg.per_id_train,
        cfg.per_id_query,
        cfg.per_id_gallery,
    )
    .map_err(setup_err)
}

/// Trains on the synthetic identities, writing a checkpoint and a
/// per-epoch loss trace CSV.
pub fn cmd_train(
    cfg: &RunConfig,
    checkpoint: &Path,
    trace_path: &Path,
    out: &mut dyn Write,
) -> Result<Vec<EpochTrace>> {
    let bb = cfg.backbone()?;
    let (train_samples, _, _) = load_split(cfg)?;
    let (ps, trace) = train(&bb, &cfg.train_config(), &train_samples, cfg.seed)?;
    save_checkpoint(checkpoint, &ps)?;
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|t| {
            vec![
                t.epoch.to_string(),
                t.id_loss.to_string(),
                t.triplet_loss.to_string(),
                t.total.to_string(),
            ]
        })
        .collect();
    write_csv(trace_path, &["epoch", "id_loss", "triplet_loss", "total"], &rows)?;
    let last = trace.last().expect("at least one epoch");
    emit(
        out,
        format!(
            "trained {} epochs on {} samples; final loss {} (id {}, triplet {})",
            trace.len(),
            train_samples.len(),
            last.total,
            last.id_loss,
            last.triplet_loss
        ),
    )?;
    emit(out, format!("wrote {}", checkpoint.display()))?;
    emit(out, format!("wrote {}", trace_path.display()))?;
    Ok(trace)
}

fn embedding_rows(batch: &EmbeddingBatch) -> Vec<Vec<f64>> {
    let d = batch.embeddings.shape()[1];
    batch
        .embeddings
        .data()
        .chunks(d)
        .map(|row| row.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Restores a model registered from the run configuration.
fn restore_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(BackboneConfig, ParameterSet<f32>)> {
    let bb = cfg.backbone()?;
    let mut ps = ParameterSet::<f32>::new();
    register_model(&mut ps, cfg.seed, &bb)?;
    load_checkpoint(checkpoint, &mut ps)?;
    Ok((bb, ps))
}

/// Evaluates a checkpoint on the query/gallery split: CMC ranks and mAP.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    report_path: &Path,
    out: &mut dyn Write,
) -> Result<EvalReport> {
    let (bb, ps) = restore_model(cfg, checkpoint)?;
    let (_, query, gallery) = load_split(cfg)?;
    let qb = backbone_forward(&ps, &bb, &query, 16)?;
    let gb = backbone_forward(&ps, &bb, &gallery, 16)?;
    let report = cmc_map(
        &embedding_rows(&qb),
        &qb.labels,
        &embedding_rows(&gb),
        &gb.labels,
    )?;
    let mut rows: Vec<Vec<String>> = (0..rga_reid::CMC_RANKS)
        .map(|k| vec![format!("rank{}", k + 1), report.cmc[k].to_string()])
        .collect();
    rows.push(vec!["map".into(), report.map.to_string()]);
    rows.push(vec!["num_query".into(), report.num_query.to_string()]);
    rows.push(vec!["num_gallery".into(), report.num_gallery.to_string()]);
    write_csv(report_path, &["metric", "value"], &rows)?;
    emit(
        out,
        format!(
            "rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  mAP {:.4}  ({} query, {} gallery)",
            report.cmc[0], report.cmc[4], report.cmc[9], report.map, report.num_query,
            report.num_gallery
        ),
    )?;
    emit(out, format!("wrote {}", report_path.display()))?;
    Ok(report)
}

/// The block's attention module, or a named error when the block has none.
fn block_module(bb: &BackboneConfig, block: usize) -> Result<ModuleKind> {
    if block >= bb.widths.len() {
        return Err(usage(format!(
            "block {block} out of range for a {}-block model",
            bb.widths.len()
        )));
    }
    match bb.attention {
        Some(kind) if bb.insert_after[block] => Ok(kind),
        Some(_) => Err(CliError::Failed(format!(
            "block {block} has no attention module inserted"
        ))),
        None => Err(CliError::Failed(
            "the configured model has no attention modules".into(),
        )),
    }
}

/// The features the block's spatial gate actually sees: for the
/// channel-then-spatial composition that is the channel-gated map.
fn spatial_gate_input(
    ps: &ParameterSet<f32>,
    bb: &BackboneConfig,
    kind: ModuleKind,
    block: usize,
    feat: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    if kind == ModuleKind::RgaCs {
        let acfg = bb.effective_attention().expect("relation-aware kind");
        let gate = rga_c_map(ps, &format!("attn{block}.channel"), feat, &acfg)?;
        Ok(apply_attention_channel(feat, &gate)?)
    } else {
        Ok(feat.clone())
    }
}

fn spatial_map(
    ps: &ParameterSet<f32>,
    bb: &BackboneConfig,
    kind: ModuleKind,
    block: usize,
    feat: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    match kind {
        ModuleKind::RgaS | ModuleKind::RgaSc | ModuleKind::RgaCs | ModuleKind::RgaPar => {
            let acfg = bb.effective_attention().expect("relation-aware kind");
            let input = spatial_gate_input(ps, bb, kind, block, feat)?;
            Ok(rga_s_map(ps, &format!("attn{block}.spatial"), &input, &acfg)?)
        }
        ModuleKind::CbamS => {
            let s = feat.shape().to_vec();
            let mut sess = Session::new(Mode::Eval);
            let batched = Tensor::new(&[1, s[0], s[1], s[2]], feat.data().to_vec())?;
            let id = sess.input(batched);
            let g = cbam_s_gate(&mut sess, ps, &format!("attn{block}"), id)?;
            let v = sess.tape.value(g).data().to_vec();
            Ok(Tensor::new(&[s[1], s[2]], v)?)
        }
        other => Err(CliError::Failed(format!(
            "block {block} module '{other}' has no spatial attention map"
        ))),
    }
}

/// Exports one block's spatial attention map for one image as CSV and PGM.
pub fn cmd_export_attn(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: usize,
    block: usize,
    pgm_path: &Path,
    csv_path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let (bb, ps) = restore_model(cfg, checkpoint)?;
    let kind = block_module(&bb, block)?;
    let samples = gen_dataset(cfg.num_ids, cfg.per_id_total(), cfg.seed).map_err(setup_err)?;
    let sample = samples
        .get(image)
        .ok_or_else(|| usage(format!("image {image} out of range for {} samples", samples.len())))?;
    let feat = features_before_attention(&ps, &bb, &sample.image, block)?;
    let map = spatial_map(&ps, &bb, kind, block, &feat)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    write_grid(csv_path, map.data(), h, w)?;
    write_pgm(pgm_path, map.data(), h, w)?;
    emit(out, format!("block {block} spatial attention: {h}x{w} map of image {image}"))?;
    emit(out, format!("wrote {}", csv_path.display()))?;
    emit(out, format!("wrote {}", pgm_path.display()))?;
    Ok(())
}

/// Exports the pairwise-relation rows for chosen target positions, plus the
/// position-invariant mask of a freshly initialised simplified non-local
/// block on the same features for contrast.
pub fn cmd_export_relations(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: usize,
    block: usize,
    targets: &[usize],
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<Vec<PathBuf>> {
    if targets.is_empty() {
        return Err(usage("at least one target position is required"));
    }
    let (bb, ps) = restore_model(cfg, checkpoint)?;
    let kind = block_module(&bb, block)?;
    let acfg = match (kind, bb.effective_attention()) {
        (ModuleKind::RgaS | ModuleKind::RgaSc | ModuleKind::RgaCs | ModuleKind::RgaPar, Some(a))
            if a.use_relation && a.composition.uses_spatial() =>
        {
            a
        }
        _ => {
            return Err(CliError::Failed(format!(
                "block {block} module '{kind}' has no spatial pairwise relations"
            )))
        }
    };
    let samples = gen_dataset(cfg.num_ids, cfg.per_id_total(), cfg.seed).map_err(setup_err)?;
    let sample = samples
        .get(image)
        .ok_or_else(|| usage(format!("image {image} out of range for {} samples", samples.len())))?;
    let feat = features_before_attention(&ps, &bb, &sample.image, block)?;
    let input = spatial_gate_input(&ps, &bb, kind, block, &feat)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let n = h * w;
    for &t in targets {
        if t >= n {
            return Err(usage(format!("target {t} out of range for {n} positions")));
        }
    }
    let r = spatial_affinity(&ps, &format!("attn{block}.spatial"), &input, &acfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut written = Vec::new();
    for &t in targets {
        let row = &r.data()[t * n..(t + 1) * n];
        let path = out_dir.join(format!("relation_block{block}_target{t}.csv"));
        write_grid(&path, row, h, w)?;
        written.push(path);
    }
    let mut snl_ps = ParameterSet::<f32>::new();
    let mut rng = StreamRng::derive(cfg.seed, Stream::Init, KEY_SNL_PROBE);
    register_snl(&mut snl_ps, &mut rng, "snl", c)?;
    let snl = snl_mask_map(&snl_ps, "snl", &input)?;
    let snl_path = out_dir.join(format!("relation_block{block}_snl.csv"));
    write_grid(&snl_path, snl.data(), h, w)?;
    written.push(snl_path);
    for path in &written {
        emit(out, format!("wrote {}", path.display()))?;
    }
    Ok(written)
}

/// Prints the model's parameter count and each attention insertion's share.
pub fn cmd_param_count(cfg: &RunConfig, out: &mut dyn Write) -> Result<usize> {
    let bb = cfg.backbone()?;
    let total = model_param_count(&bb);
    emit(out, format!("model parameters: {total}"))?;
    if let Some(kind) = bb.attention {
        let dims = bb.block_dims();
        let acfg = bb.effective_attention();
        for i in (0..bb.widths.len()).filter(|&i| bb.insert_after[i]) {
            let (c, h, w) = dims[i];
            let count = match &acfg {
                Some(acfg) => compose_count(c, h, w, acfg),
                None => kind.param_count(c, h, w),
            };
            emit(out, format!("attn{i} ({c} channels, {h}x{w}): {count}"))?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub c: usize,
    pub module: ModuleKind,
    pub median_ms: f64,
    pub params: usize,
}

/// Times eval-mode forward passes of every benchmark module over the
/// `(positions, channels)` sweep: median of `runs` after one warmup.
pub fn cmd_bench(
    cfg: &RunConfig,
    sizes: &[(usize, usize)],
    runs: usize,
    csv_path: &Path,
    out: &mut dyn Write,
) -> Result<Vec<BenchRow>> {
    if runs < 5 {
        return Err(usage(format!("bench needs at least 5 runs, got {runs}")));
    }
    if sizes.is_empty() {
        return Err(usage("bench needs at least one size"));
    }
    let mut bench_rows = Vec::new();
    for (si, &(n, c)) in sizes.iter().enumerate() {
        let h = (n as f64).sqrt().round() as usize;
        if h * h != n {
            return Err(usage(format!("bench size n={n} must be a perfect square")));
        }
        let w = h;
        for (mi, &kind) in BENCH_MODULES.iter().enumerate() {
            let mut ps = ParameterSet::<f64>::new();
            let key = KEY_CHECK + 100 + (si * BENCH_MODULES.len() + mi) as u64;
            let mut rng = StreamRng::derive(cfg.seed, Stream::Init, key);
            register_module(cfg, kind, &mut ps, &mut rng, kind.name(), c, h, w)?;
            let ps: ParameterSet<f32> = ps.cast();
            let data: Vec<f32> = (0..c * h * w)
                .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
                .collect();
            let input = Tensor::new(&[1, c, h, w], data)?;
            let acfg = module_attention(cfg, kind);
            let mut timings_ms = Vec::with_capacity(runs);
            for run in 0..runs + 1 {
                let start = Instant::now();
                let mut sess = Session::new(Mode::Eval);
                let id = sess.input(input.clone());
                let y = match &acfg {
                    Some(acfg) => compose(&mut sess, &ps, kind.name(), id, acfg)?,
                    None => kind.forward(&mut sess, &ps, kind.name(), id)?,
                };
                std::hint::black_box(sess.tape.value(y).data()[0]);
                if run > 0 {
                    timings_ms.push(start.elapsed().as_secs_f64() * 1e3);
                }
            }
            timings_ms.sort_by(f64::total_cmp);
            let median_ms = timings_ms[timings_ms.len() / 2];
            let params = match &acfg {
                Some(acfg) => compose_count(c, h, w, acfg),
                None => kind.param_count(c, h, w),
            };
            bench_rows.push(BenchRow { n, c, module: kind, median_ms, params });
        }
    }
    let rows: Vec<Vec<String>> = bench_rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.c.to_string(),
                r.module.to_string(),
                r.median_ms.to_string(),
                r.params.to_string(),
            ]
        })
        .collect();
    write_csv(csv_path, &["n", "c", "module", "median_ms", "param_count"], &rows)?;
    emit(out, format!("timed {} module/size combinations", bench_rows.len()))?;
    emit(out, format!("wrote {}", csv_path.display()))?;
    Ok(bench_rows)
}
