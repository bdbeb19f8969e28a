//! Acceptance gate for the whole workspace. Each test checks one release
//! criterion and prints exactly one `criterion N (...): PASS|FAIL` line;
//! the toy training grid is built once and shared by the tests that need
//! trained models.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rga_attention::{
    apply_attention_channel, apply_attention_spatial, cbam_c_gate, cbam_s_gate, channel_affinity,
    register_cbam_c, register_cbam_s, register_compose, register_conv_bn, register_rga_c,
    register_rga_s, register_se, register_snl, rga_c_map, rga_s_map, se_gate, snl_forward,
    spatial_affinity, AttentionConfig, Composition, EmbeddingMode, ModuleKind,
};
use rga_cli::{
    cmd_bench, cmd_eval, cmd_gradcheck, cmd_train, module_attention, read_csv, GradcheckOptions,
    RunConfig, BENCH_MODULES,
};
use rga_reid::{
    backbone_forward, cmc_map, features_before_attention, gen_dataset, id_loss_graph,
    model_param_count, register_model, split_dataset, train, triplet_batch_hard_graph,
    BackboneConfig, EmbeddingBatch, Sample,
};
use rga_tensor::{
    jitter_params, Mode, NodeId, ParameterSet, Session, Stream, StreamRng, Tensor, BN_EPS,
};

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn err_s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Runs one criterion body and prints its verdict line.
fn verdict(n: usize, label: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("criterion {n} ({label}): PASS"),
        Err(msg) => {
            println!("criterion {n} ({label}): FAIL");
            panic!("criterion {n} ({label}): {msg}");
        }
    }
}

fn embedding_rows(batch: &EmbeddingBatch) -> Vec<Vec<f64>> {
    let dim = batch.embeddings.shape()[1];
    batch
        .embeddings
        .data()
        .chunks(dim)
        .map(|row| row.iter().map(|&v| v as f64).collect())
        .collect()
}

// ---- shared toy-experiment grid ----

const GRID_SEEDS: [u64; 3] = [21, 22, 23];
const GRID_MODULES: [&str; 6] = ["none", "rga-s", "rga-c", "rga-sc", "rga-cs", "rga-par"];
/// Block whose output feeds the attention module in the grid model.
const GRID_ATTN_BLOCK: usize = 2;

/// The recipe every grid entry shares: a three-block net whose last block
/// keeps 16x8 resolution, so spatial attention operates on a grid fine
/// enough to separate body from background.
fn grid_cfg(module: &str, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (key, value) in [
        ("widths", "8,16,32"),
        ("downsample", "true,true,false"),
        ("insert_after", "false,false,true"),
        ("lr", "0.01"),
        ("num_ids", "16"),
        ("per_id_train", "20"),
        ("per_id_query", "3"),
        ("per_id_gallery", "5"),
        ("epochs", "40"),
        ("batch_p", "4"),
        ("batch_k", "4"),
        ("module", module),
        ("seed", &seed.to_string()),
    ] {
        cfg.set(key, value).expect(key);
    }
    cfg
}

/// A trained spatial-attention model kept around for relation probes.
struct TrainedSpatial {
    bb: BackboneConfig,
    ps: ParameterSet<f32>,
    image: Tensor<f32>,
}

struct Grid {
    /// `maps[m][s]` = mAP of `GRID_MODULES[m]` under `GRID_SEEDS[s]`.
    maps: Vec<[f64; 3]>,
    build: Duration,
    spatial: TrainedSpatial,
}

impl Grid {
    fn mean(&self, module: &str) -> f64 {
        let i = GRID_MODULES.iter().position(|&m| m == module).expect(module);
        self.maps[i].iter().sum::<f64>() / GRID_SEEDS.len() as f64
    }
}

static GRID: OnceLock<Grid> = OnceLock::new();

fn grid() -> &'static Grid {
    GRID.get_or_init(build_grid)
}

fn build_grid() -> Grid {
    let started = Instant::now();
    let splits: Vec<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> = GRID_SEEDS
        .iter()
        .map(|&seed| {
            let cfg = grid_cfg("none", seed);
            let samples =
                gen_dataset(cfg.num_ids, cfg.per_id_total(), seed).expect("grid dataset");
            split_dataset(
                &samples,
                cfg.per_id_total(),
                cfg.per_id_train,
                cfg.per_id_query,
                cfg.per_id_gallery,
            )
            .expect("grid split")
        })
        .collect();

    let mut maps = Vec::new();
    let mut spatial = None;
    for &module in &GRID_MODULES {
        let mut row = [0.0; 3];
        for (si, &seed) in GRID_SEEDS.iter().enumerate() {
            let cfg = grid_cfg(module, seed);
            let bb = cfg.backbone().expect("grid backbone");
            let (train_samples, query, gallery) = &splits[si];
            let (ps, _) =
                train(&bb, &cfg.train_config(), train_samples, seed).expect("grid training");
            let qb = backbone_forward(&ps, &bb, query, 16).expect("query forward");
            let gb = backbone_forward(&ps, &bb, gallery, 16).expect("gallery forward");
            let report = cmc_map(
                &embedding_rows(&qb),
                &qb.labels,
                &embedding_rows(&gb),
                &gb.labels,
            )
            .expect("grid eval");
            row[si] = report.map;
            if module == "rga-s" && si == 0 {
                spatial = Some(TrainedSpatial {
                    bb,
                    ps,
                    image: query[0].image.clone(),
                });
            }
        }
        maps.push(row);
    }
    Grid {
        maps,
        build: started.elapsed(),
        spatial: spatial.expect("rga-s entry was trained"),
    }
}

fn grid_report(g: &Grid) -> String {
    let mut out = String::new();
    out.push_str("composition ablation, mean average precision\n");
    out.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "module", "seed21", "seed22", "seed23", "mean", "vs base"
    ));
    let base = g.mean("none");
    for (i, &module) in GRID_MODULES.iter().enumerate() {
        let name = if module == "none" { "baseline" } else { module };
        let mean = g.maps[i].iter().sum::<f64>() / 3.0;
        out.push_str(&format!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>+9.4}\n",
            name, g.maps[i][0], g.maps[i][1], g.maps[i][2], mean, mean - base
        ));
    }
    out
}

// ---- criterion 1 ----

#[test]
fn criterion_1_gradient_correctness() {
    verdict(1, "gradient correctness", || {
        let started = Instant::now();

        // Every module kind, every parameter tensor, all elements probed.
        let mut all_modules = RunConfig::default();
        all_modules.set("module", "none").map_err(err_s)?;
        let opts = GradcheckOptions {
            full_model: false,
            max_samples: None,
            corrupt: None,
        };
        let mut out = Vec::new();
        let ok = cmd_gradcheck(&all_modules, &opts, &mut out).map_err(err_s)?;
        let text = String::from_utf8_lossy(&out);
        ensure!(ok, "module gradients out of tolerance:\n{text}");
        for kind in ModuleKind::ALL {
            ensure!(
                text.contains(&format!("== {kind} ==")),
                "module {kind} missing from the report"
            );
        }

        // The full default model (spatial+channel attention at two blocks)
        // on a two-image batch, every tensor probed at sampled elements.
        let full = RunConfig::default();
        let opts = GradcheckOptions {
            full_model: true,
            max_samples: Some(8),
            corrupt: None,
        };
        let mut out = Vec::new();
        let ok = cmd_gradcheck(&full, &opts, &mut out).map_err(err_s)?;
        let text = String::from_utf8_lossy(&out);
        ensure!(ok, "full-model gradients out of tolerance:\n{text}");
        let model_section = text
            .split("== model ==")
            .nth(1)
            .ok_or("full-model section missing")?;
        let reported = model_section
            .lines()
            .filter(|l| l.contains(" max_rel_err="))
            .count();
        let bb = full.backbone().map_err(err_s)?;
        let mut ps = ParameterSet::<f64>::new();
        register_model(&mut ps, full.seed, &bb).map_err(err_s)?;
        let trainable = ps.iter().filter(|(_, p)| p.trainable).count();
        ensure!(
            reported == trainable,
            "model report covers {reported} tensors, the model has {trainable}"
        );

        let elapsed = started.elapsed();
        ensure!(
            elapsed < Duration::from_secs(300),
            "gradient checks took {elapsed:?}, budget is 5 minutes"
        );
        Ok(())
    });
}

// ---- criterion 2 ----

/// 1x1-conv + frozen batch norm + relu, computed with plain scalar loops.
fn embed_oracle(
    ps: &ParameterSet<f64>,
    prefix: &str,
    nodes: &[Vec<f64>],
    d_out: usize,
) -> Vec<Vec<f64>> {
    let get = |part: &str| ps.value(&format!("{prefix}.{part}")).expect(part).data().to_vec();
    let w = get("weight");
    let gamma = get("gamma");
    let beta = get("beta");
    let mean = get("running_mean");
    let var = get("running_var");
    nodes
        .iter()
        .map(|node| {
            (0..d_out)
                .map(|k| {
                    let mut z = 0.0;
                    for (d, &v) in node.iter().enumerate() {
                        z += w[k * node.len() + d] * v;
                    }
                    let z = gamma[k] * (z - mean[k]) / (var[k] + BN_EPS).sqrt() + beta[k];
                    z.max(0.0)
                })
                .collect()
        })
        .collect()
}

fn scramble_running_stats(ps: &mut ParameterSet<f64>, rng: &mut StreamRng) {
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for name in names {
        if name.ends_with(".running_mean") {
            for v in ps.get_mut(&name).expect("name").value.data_mut() {
                *v = rng.uniform_in(-0.3, 0.3);
            }
        } else if name.ends_with(".running_var") {
            for v in ps.get_mut(&name).expect("name").value.data_mut() {
                *v = rng.uniform_in(0.5, 1.5);
            }
        }
    }
}

const MODES: [EmbeddingMode; 3] = [
    EmbeddingMode::None,
    EmbeddingMode::Symmetric,
    EmbeddingMode::Asymmetric,
];

fn register_embeddings(
    ps: &mut ParameterSet<f64>,
    rng: &mut StreamRng,
    mode: EmbeddingMode,
    d_in: usize,
    d_out: usize,
) {
    if mode != EmbeddingMode::None {
        register_conv_bn(ps, rng, "m.theta", d_in, d_out, 1).expect("theta");
    }
    if mode == EmbeddingMode::Asymmetric {
        register_conv_bn(ps, rng, "m.phi", d_in, d_out, 1).expect("phi");
    }
    jitter_params(ps, 0.2, rng);
    scramble_running_stats(ps, rng);
}

fn oracle_pair(
    ps: &ParameterSet<f64>,
    mode: EmbeddingMode,
    nodes: &[Vec<f64>],
    d_out: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    match mode {
        EmbeddingMode::None => (nodes.to_vec(), nodes.to_vec()),
        EmbeddingMode::Symmetric => {
            let e = embed_oracle(ps, "m.theta", nodes, d_out);
            (e.clone(), e)
        }
        EmbeddingMode::Asymmetric => (
            embed_oracle(ps, "m.theta", nodes, d_out),
            embed_oracle(ps, "m.phi", nodes, d_out),
        ),
    }
}

#[test]
fn criterion_2_affinity_oracles() {
    verdict(2, "affinity oracle equivalence", || {
        let mut shapes = 0;
        for case in 0..28u64 {
            let mut rng = StreamRng::derive(4242, Stream::Data, case);
            let mode = MODES[(case % 3) as usize];
            let cfg = AttentionConfig {
                s1: [1, 2, 4][rng.below(3)],
                embedding_mode: mode,
                use_original: false,
                composition: Composition::Spatial,
                ..AttentionConfig::default()
            };

            // Spatial: nodes are positions carrying channel vectors.
            let c = cfg.s1 * (1 + rng.below(3));
            let (h, w) = (1 + rng.below(3), 1 + rng.below(3));
            let n = h * w;
            let mut ps = ParameterSet::<f64>::new();
            register_embeddings(&mut ps, &mut rng, mode, c, c / cfg.s1);
            let x = Tensor::from_fn(&[c, h, w], |_| rng.uniform_in(-1.0, 1.0));
            let got = spatial_affinity(&ps, "m", &x, &cfg).map_err(err_s)?;
            ensure!(
                got.shape() == [n, n],
                "case {case}: spatial affinity shape {:?}",
                got.shape()
            );
            let nodes: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..c).map(|ch| x.data()[ch * n + i]).collect())
                .collect();
            let (th, ph) = oracle_pair(&ps, mode, &nodes, c / cfg.s1);
            for i in 0..n {
                for j in 0..n {
                    let want: f64 = th[i].iter().zip(&ph[j]).map(|(a, b)| a * b).sum();
                    let gotv = got.data()[i * n + j];
                    ensure!(
                        (gotv - want).abs() <= 1e-6,
                        "spatial case {case} ({c},{h},{w}) s1={} [{i},{j}]: {gotv} vs {want}",
                        cfg.s1
                    );
                }
            }
            shapes += 1;

            // Channel: nodes are channels carrying flattened spatial maps.
            let cc = 1 + rng.below(5);
            let (ch_h, ch_w) = (1 + rng.below(3), 2 * (1 + rng.below(2)));
            let cn = ch_h * ch_w;
            let cs1 = if cn % 2 == 0 { [1, 2][rng.below(2)] } else { 1 };
            let ccfg = AttentionConfig {
                s1: cs1,
                embedding_mode: mode,
                use_original: false,
                composition: Composition::Channel,
                ..AttentionConfig::default()
            };
            let mut ps = ParameterSet::<f64>::new();
            register_embeddings(&mut ps, &mut rng, mode, cn, cn / cs1);
            let x = Tensor::from_fn(&[cc, ch_h, ch_w], |_| rng.uniform_in(-1.0, 1.0));
            let got = channel_affinity(&ps, "m", &x, &ccfg).map_err(err_s)?;
            ensure!(
                got.shape() == [cc, cc],
                "case {case}: channel affinity shape {:?}",
                got.shape()
            );
            let nodes: Vec<Vec<f64>> = (0..cc)
                .map(|ch| (0..cn).map(|p| x.data()[ch * cn + p]).collect())
                .collect();
            let (th, ph) = oracle_pair(&ps, mode, &nodes, cn / cs1);
            for i in 0..cc {
                for j in 0..cc {
                    let want: f64 = th[i].iter().zip(&ph[j]).map(|(a, b)| a * b).sum();
                    let gotv = got.data()[i * cc + j];
                    ensure!(
                        (gotv - want).abs() <= 1e-6,
                        "channel case {case} ({cc},{ch_h},{ch_w}) s1={cs1} [{i},{j}]: {gotv} vs {want}"
                    );
                }
            }
            shapes += 1;
        }
        ensure!(shapes >= 50, "only {shapes} shapes checked");
        Ok(())
    });
}

// ---- criterion 3 ----

fn graph_values<F>(x: &Tensor<f64>, f: F) -> Result<Vec<f64>, String>
where
    F: FnOnce(&mut Session<f64>, NodeId) -> rga_attention::Result<NodeId>,
{
    let s = x.shape();
    let mut sess = Session::new(Mode::Eval);
    let batched = Tensor::new(&[1, s[0], s[1], s[2]], x.data().to_vec()).map_err(err_s)?;
    let id = sess.input(batched);
    let g = f(&mut sess, id).map_err(err_s)?;
    Ok(sess.tape.value(g).data().to_vec())
}

fn zero_param(ps: &mut ParameterSet<f64>, name: &str) {
    for v in ps.get_mut(name).expect(name).value.data_mut() {
        *v = 0.0;
    }
}

#[test]
fn criterion_3_attention_bounds_and_identities() {
    verdict(3, "attention bounds and identities", || {
        let small = AttentionConfig {
            s1: 2,
            s2: 2,
            ..AttentionConfig::default()
        };

        // Strict (0,1) bounds for every gate on randomized inputs.
        for case in 0..6u64 {
            let mut rng = StreamRng::derive(5151, Stream::Init, case);
            let c = 2 * (1 + rng.below(3));
            let (h, w) = (1 + rng.below(2), 2 * (1 + rng.below(2)));
            let mut ps = ParameterSet::<f64>::new();
            register_compose(&mut ps, &mut rng, "m", c, h, w, &small).map_err(err_s)?;
            register_se(&mut ps, &mut rng, "se", c, 2).map_err(err_s)?;
            register_cbam_c(&mut ps, &mut rng, "cc", c, 2).map_err(err_s)?;
            register_cbam_s(&mut ps, &mut rng, "cs").map_err(err_s)?;
            jitter_params(&mut ps, 0.3, &mut rng);
            let x = Tensor::from_fn(&[c, h, w], |_| rng.uniform_in(-2.0, 2.0));

            let mut gates: Vec<(&str, Vec<f64>)> = vec![
                (
                    "spatial map",
                    rga_s_map(&ps, "m.spatial", &x, &small).map_err(err_s)?.data().to_vec(),
                ),
                (
                    "channel map",
                    rga_c_map(&ps, "m.channel", &x, &small).map_err(err_s)?.data().to_vec(),
                ),
            ];
            gates.push(("squeeze gate", graph_values(&x, |s, id| se_gate(s, &ps, "se", id))?));
            gates.push(("pooled channel gate", graph_values(&x, |s, id| cbam_c_gate(s, &ps, "cc", id))?));
            gates.push(("conv spatial gate", graph_values(&x, |s, id| cbam_s_gate(s, &ps, "cs", id))?));
            for (what, values) in gates {
                ensure!(!values.is_empty(), "case {case}: {what} empty");
                for &v in &values {
                    ensure!(
                        v > 0.0 && v < 1.0,
                        "case {case}: {what} value {v} outside (0,1)"
                    );
                }
            }
        }

        // Unit gates pass features through unchanged; zero gates null them.
        let mut rng = StreamRng::new(66, Stream::Data);
        let x = Tensor::from_fn(&[3, 2, 4], |_| rng.uniform_in(-2.0, 2.0));
        let ones_s = Tensor::full(&[2, 4], 1.0);
        let zeros_s = Tensor::zeros(&[2, 4]);
        let same = apply_attention_spatial(&x, &ones_s).map_err(err_s)?;
        ensure!(same.data() == x.data(), "unit spatial gate changed the features");
        let none = apply_attention_spatial(&x, &zeros_s).map_err(err_s)?;
        ensure!(none.data().iter().all(|&v| v == 0.0), "zero spatial gate left residue");
        let ones_c = Tensor::full(&[3], 1.0);
        let zeros_c = Tensor::zeros(&[3]);
        let same = apply_attention_channel(&x, &ones_c).map_err(err_s)?;
        ensure!(same.data() == x.data(), "unit channel gate changed the features");
        let none = apply_attention_channel(&x, &zeros_c).map_err(err_s)?;
        ensure!(none.data().iter().all(|&v| v == 0.0), "zero channel gate left residue");

        // A zeroed final layer drives every gate to exactly sigmoid(0).
        let mut rng = StreamRng::new(67, Stream::Init);
        let (c, h, w) = (4, 2, 2);
        let mut ps = ParameterSet::<f64>::new();
        register_rga_s(&mut ps, &mut rng, "zs", c, h, w, &small).map_err(err_s)?;
        register_rga_c(&mut ps, &mut rng, "zc", c, h, w, &small).map_err(err_s)?;
        register_se(&mut ps, &mut rng, "se", c, 2).map_err(err_s)?;
        register_cbam_c(&mut ps, &mut rng, "cc", c, 2).map_err(err_s)?;
        register_cbam_s(&mut ps, &mut rng, "cs").map_err(err_s)?;
        jitter_params(&mut ps, 0.3, &mut rng);
        for name in ["zs.head2", "zc.head2"] {
            zero_param(&mut ps, &format!("{name}.weight"));
            zero_param(&mut ps, &format!("{name}.gamma"));
            zero_param(&mut ps, &format!("{name}.beta"));
        }
        for name in ["se.fc2", "cc.fc2"] {
            zero_param(&mut ps, &format!("{name}.weight"));
            zero_param(&mut ps, &format!("{name}.bias"));
        }
        zero_param(&mut ps, "cs.conv.weight");
        let x = Tensor::from_fn(&[c, h, w], |_| rng.uniform_in(-2.0, 2.0));
        let mut gates: Vec<(&str, Vec<f64>)> = vec![
            ("spatial map", rga_s_map(&ps, "zs", &x, &small).map_err(err_s)?.data().to_vec()),
            ("channel map", rga_c_map(&ps, "zc", &x, &small).map_err(err_s)?.data().to_vec()),
        ];
        gates.push(("squeeze gate", graph_values(&x, |s, id| se_gate(s, &ps, "se", id))?));
        gates.push(("pooled channel gate", graph_values(&x, |s, id| cbam_c_gate(s, &ps, "cc", id))?));
        gates.push(("conv spatial gate", graph_values(&x, |s, id| cbam_s_gate(s, &ps, "cs", id))?));
        for (what, values) in gates {
            for &v in &values {
                ensure!(v == 0.5, "{what}: zeroed final layer gave {v}, not 0.5");
            }
        }
        Ok(())
    });
}

// ---- criterion 4 ----

#[test]
fn criterion_4_target_invariance_vs_adaptivity() {
    verdict(4, "target invariance vs relation adaptivity", || {
        // The simplified block adds one shared context vector: the residual
        // at every position is identical.
        let mut rng = StreamRng::new(77, Stream::Init);
        let (c, h, w) = (6, 3, 4);
        let n = h * w;
        let mut ps = ParameterSet::<f64>::new();
        register_snl(&mut ps, &mut rng, "snl", c).map_err(err_s)?;
        jitter_params(&mut ps, 0.2, &mut rng);
        let x = Tensor::from_fn(&[1, c, h, w], |_| rng.uniform_in(-1.0, 1.0));
        let mut sess = Session::new(Mode::Eval);
        let id = sess.input(x.clone());
        let out = snl_forward(&mut sess, &ps, "snl", id).map_err(err_s)?;
        let v = sess.tape.value(out);
        for ch in 0..c {
            let base = v.data()[ch * n] - x.data()[ch * n];
            for i in 1..n {
                let delta = v.data()[ch * n + i] - x.data()[ch * n + i];
                ensure!(
                    (delta - base).abs() < 1e-12,
                    "channel {ch}: context at position {i} differs from position 0 by {:.3e}",
                    (delta - base).abs()
                );
            }
        }

        // The trained relation-aware model keys its rows to the target.
        let g = grid();
        let t = &g.spatial;
        let feat =
            features_before_attention(&t.ps, &t.bb, &t.image, GRID_ATTN_BLOCK).map_err(err_s)?;
        let acfg = t
            .bb
            .effective_attention()
            .ok_or("trained model lost its attention settings")?;
        let prefix = format!("attn{GRID_ATTN_BLOCK}.spatial");
        let r = spatial_affinity(&t.ps, &prefix, &feat, &acfg).map_err(err_s)?;
        let rn = r.shape()[0];
        let (a, b) = (0, rn / 2);
        let max_diff = (0..rn)
            .map(|j| (r.data()[a * rn + j] - r.data()[b * rn + j]).abs() as f64)
            .fold(0.0, f64::max);
        ensure!(
            max_diff > 1e-6,
            "trained relation rows {a} and {b} agree to within {max_diff:.3e}"
        );
        Ok(())
    });
}

// ---- criterion 5 ----

struct OracleEval {
    cmc: [f64; 10],
    map: f64,
}

/// Brute-force ranking: sort every query's gallery by distance with index
/// tie-breaks, then accumulate first-hit ranks and average precision.
fn oracle_eval(
    query: &[Vec<f64>],
    query_ids: &[usize],
    gallery: &[Vec<f64>],
    gallery_ids: &[usize],
) -> OracleEval {
    let mut cmc = [0.0; 10];
    let mut ap_sum = 0.0;
    for (q, &qid) in query.iter().zip(query_ids) {
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        let dist = |gi: usize| -> f64 {
            q.iter()
                .zip(&gallery[gi])
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        order.sort_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b)));
        let first = order
            .iter()
            .position(|&gi| gallery_ids[gi] == qid)
            .expect("query id present in gallery")
            + 1;
        for (k, slot) in cmc.iter_mut().enumerate() {
            if first <= k + 1 {
                *slot += 1.0;
            }
        }
        let mut relevant = 0;
        let mut precision_sum = 0.0;
        for (rank0, &gi) in order.iter().enumerate() {
            if gallery_ids[gi] == qid {
                relevant += 1;
                precision_sum += relevant as f64 / (rank0 + 1) as f64;
            }
        }
        ap_sum += precision_sum / relevant as f64;
    }
    let nq = query.len() as f64;
    for slot in &mut cmc {
        *slot /= nq;
    }
    OracleEval {
        cmc,
        map: ap_sum / nq,
    }
}

#[test]
fn criterion_5_metric_oracle() {
    verdict(5, "metric oracle", || {
        for inst in 0..120u64 {
            let mut rng = StreamRng::derive(6006, Stream::Sampler, inst);
            let num_ids = 2 + rng.below(3);
            let nq = 1 + rng.below(5);
            let ng = num_ids + rng.below(7);
            let dim = 1 + rng.below(4);
            let gallery_ids: Vec<usize> = (0..ng).map(|i| i % num_ids).collect();
            let query_ids: Vec<usize> = (0..nq).map(|_| rng.below(num_ids)).collect();
            let mk = |rng: &mut StreamRng| -> Vec<f64> {
                (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
            };
            let query: Vec<Vec<f64>> = (0..nq).map(|_| mk(&mut rng)).collect();
            let gallery: Vec<Vec<f64>> = (0..ng).map(|_| mk(&mut rng)).collect();

            let got = cmc_map(&query, &query_ids, &gallery, &gallery_ids).map_err(err_s)?;
            let want = oracle_eval(&query, &query_ids, &gallery, &gallery_ids);
            for k in 0..10 {
                ensure!(
                    (got.cmc[k] - want.cmc[k]).abs() <= 1e-12,
                    "instance {inst}: cmc@{} {} vs oracle {}",
                    k + 1,
                    got.cmc[k],
                    want.cmc[k]
                );
            }
            ensure!(
                (got.map - want.map).abs() <= 1e-12,
                "instance {inst}: mAP {} vs oracle {}",
                got.map,
                want.map
            );
        }

        // Worked example: relevant items land at ranks 1 and 3 of five.
        let query = vec![vec![0.0]];
        let gallery = vec![vec![0.1], vec![0.2], vec![0.3], vec![0.4], vec![0.5]];
        let got = cmc_map(&query, &[0], &gallery, &[0, 1, 0, 1, 1]).map_err(err_s)?;
        let want = (1.0 + 2.0 / 3.0) / 2.0;
        ensure!(
            (got.map - want).abs() <= 1e-9,
            "worked example: mAP {} vs {want}",
            got.map
        );
        ensure!(got.cmc[0] == 1.0, "worked example: rank-1 {}", got.cmc[0]);
        Ok(())
    });
}

// ---- criterion 6 ----

#[test]
fn criterion_6_loss_oracles() {
    verdict(6, "loss oracles", || {
        // Batch-hard triplet against an explicit scan of all pairs.
        for inst in 0..30u64 {
            let mut rng = StreamRng::derive(7007, Stream::Data, inst);
            let p = 2 + rng.below(2);
            let k = 2 + rng.below(2);
            let b = p * k;
            let dim = 2 + rng.below(4);
            let margin = [0.2, 0.3, 0.5][rng.below(3)];
            let mut labels: Vec<usize> = (0..b).map(|i| i / k).collect();
            rng.shuffle(&mut labels);
            let emb = Tensor::from_fn(&[b, dim], |_| rng.uniform_in(-1.0, 1.0));

            let mut sess = Session::new(Mode::Eval);
            let e = sess.input(emb.clone());
            let loss = triplet_batch_hard_graph(&mut sess, e, &labels, margin).map_err(err_s)?;
            let got = sess.tape.value(loss).data()[0];

            let d = |i: usize, j: usize| -> f64 {
                let d2: f64 = (0..dim)
                    .map(|t| {
                        let diff = emb.data()[i * dim + t] - emb.data()[j * dim + t];
                        diff * diff
                    })
                    .sum();
                (d2 + 1e-12).sqrt()
            };
            let mut total = 0.0;
            let mut anchors = 0;
            for a in 0..b {
                let mut hardest_pos: Option<f64> = None;
                let mut hardest_neg: Option<f64> = None;
                for o in 0..b {
                    if o == a {
                        continue;
                    }
                    if labels[o] == labels[a] {
                        hardest_pos = Some(hardest_pos.map_or(d(a, o), |v| v.max(d(a, o))));
                    } else {
                        hardest_neg = Some(hardest_neg.map_or(d(a, o), |v| v.min(d(a, o))));
                    }
                }
                if let (Some(hp), Some(hn)) = (hardest_pos, hardest_neg) {
                    total += (hp - hn + margin).max(0.0);
                    anchors += 1;
                }
            }
            let want = total / anchors as f64;
            ensure!(
                (got - want).abs() <= 1e-10,
                "instance {inst}: triplet {got} vs oracle {want}"
            );
        }

        // Uniform logits cost exactly ln K, with or without smoothing.
        for &k in &[2usize, 5, 16, 17] {
            for &(smoothing, shift) in &[(0.0, 0.0), (0.1, 0.0), (0.1, 0.7)] {
                let b = 3;
                let logits = Tensor::full(&[b, k], shift);
                let labels: Vec<usize> = (0..b).map(|i| i % k).collect();
                let mut sess = Session::new(Mode::Eval);
                let l = sess.input(logits);
                let loss = id_loss_graph(&mut sess, l, &labels, smoothing).map_err(err_s)?;
                let got = sess.tape.value(loss).data()[0];
                let want = (k as f64).ln();
                ensure!(
                    (got - want).abs() <= 1e-10,
                    "K={k} smoothing={smoothing}: {got} vs ln K = {want}"
                );
            }
        }
        Ok(())
    });
}

// ---- criterion 7 ----

#[test]
fn criterion_7_directional_toy_comparison() {
    verdict(7, "directional toy comparison", || {
        let g = grid();
        let report = grid_report(g);
        println!("{report}");
        let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation_grid.txt");
        std::fs::write(&path, &report).map_err(err_s)?;
        println!("grid report written to {}", path.display());

        let base = g.mean("none");
        let s = g.mean("rga-s");
        let c = g.mean("rga-c");
        let sc = g.mean("rga-sc");
        ensure!(
            sc >= base + 0.02,
            "spatial+channel mean mAP {sc:.4} is not 2 points above the baseline {base:.4}"
        );
        ensure!(s > base, "spatial mean mAP {s:.4} not above baseline {base:.4}");
        ensure!(c > base, "channel mean mAP {c:.4} not above baseline {base:.4}");
        ensure!(
            g.build < Duration::from_secs(900),
            "grid took {:?}, budget is 15 minutes",
            g.build
        );
        Ok(())
    });
}

// ---- criterion 8 ----

#[test]
fn criterion_8_parameter_accounting() {
    verdict(8, "parameter accounting", || {
        let mut rng = StreamRng::new(909, Stream::Init);
        let mut done = 0;
        let mut attempts = 0;
        while done < 20 {
            attempts += 1;
            ensure!(attempts < 200, "could not draw 20 valid configurations");
            let nb = 1 + rng.below(4);
            let widths: Vec<usize> = (0..nb).map(|_| [8, 16, 32][rng.below(3)]).collect();
            let downsample: Vec<bool> = (0..nb).map(|_| rng.coin(0.7)).collect();
            let module = match rng.below(11) {
                10 => None,
                k => Some(ModuleKind::ALL[k]),
            };
            let insert_after: Vec<bool> = (0..nb)
                .map(|_| module.is_some() && rng.coin(0.6))
                .collect();
            let attention_cfg = module.and_then(|m| m.attention_config()).map(|base| {
                AttentionConfig {
                    s1: [2, 4, 8][rng.below(3)],
                    s2: [2, 4, 8][rng.below(3)],
                    embedding_mode: MODES[rng.below(3)],
                    use_relation: rng.coin(0.8),
                    use_original: rng.coin(0.8),
                    composition: base.composition,
                }
            });
            let bb = BackboneConfig {
                widths,
                downsample,
                attention: module,
                insert_after,
                attention_cfg,
                embed_dim: [16, 32][rng.below(2)],
                num_classes: 4 + rng.below(16),
                ..BackboneConfig::default()
            };
            if bb.validate().is_err() {
                continue;
            }
            let mut ps = ParameterSet::<f32>::new();
            register_model(&mut ps, 500 + done as u64, &bb).map_err(err_s)?;
            let enumerated = ps.trainable_scalars();
            let analytic = model_param_count(&bb);
            ensure!(
                analytic == enumerated,
                "config {done} ({:?}, module {:?}): analytic {analytic} vs registered {enumerated}",
                bb.widths,
                bb.attention
            );
            done += 1;
        }

        // The benchmark table reports the same counts registration yields.
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().map_err(err_s)?;
        let csv_path = dir.path().join("bench.csv");
        let mut sink = Vec::new();
        let rows = cmd_bench(&cfg, &[(16, 16), (64, 16)], 5, &csv_path, &mut sink).map_err(err_s)?;
        ensure!(
            rows.len() == 2 * BENCH_MODULES.len(),
            "expected {} bench rows, got {}",
            2 * BENCH_MODULES.len(),
            rows.len()
        );
        let (_, body) = read_csv(&csv_path).map_err(err_s)?;
        for (row, line) in rows.iter().zip(&body) {
            let h = (row.n as f64).sqrt() as usize;
            let mut ps = ParameterSet::<f64>::new();
            let mut reg_rng = StreamRng::new(1, Stream::Init);
            match module_attention(&cfg, row.module) {
                Some(acfg) => {
                    register_compose(&mut ps, &mut reg_rng, "m", row.c, h, h, &acfg)
                        .map_err(err_s)?;
                }
                None => {
                    row.module
                        .register(&mut ps, &mut reg_rng, "m", row.c, h, h)
                        .map_err(err_s)?;
                }
            }
            let enumerated = ps.trainable_scalars();
            ensure!(
                row.params == enumerated,
                "bench {} at n={}: reported {} vs registered {enumerated}",
                row.module,
                row.n,
                row.params
            );
            ensure!(
                line[4] == row.params.to_string(),
                "bench CSV count column {} disagrees with {}",
                line[4],
                row.params
            );
        }
        Ok(())
    });
}

// ---- criterion 9 ----

#[test]
fn criterion_9_determinism() {
    verdict(9, "determinism", || {
        let mut cfg = grid_cfg("rga-sc", 31);
        cfg.set("epochs", "6").map_err(err_s)?;
        let dir = tempfile::tempdir().map_err(err_s)?;
        let mut artifacts = Vec::new();
        for run in 0..2 {
            let ck = dir.path().join(format!("run{run}.rgaw"));
            let tr = dir.path().join(format!("run{run}-trace.csv"));
            let rp = dir.path().join(format!("run{run}-report.csv"));
            let mut sink = Vec::new();
            cmd_train(&cfg, &ck, &tr, &mut sink).map_err(err_s)?;
            let report = cmd_eval(&cfg, &ck, &rp, &mut sink).map_err(err_s)?;
            artifacts.push((
                std::fs::read(&ck).map_err(err_s)?,
                std::fs::read(&tr).map_err(err_s)?,
                std::fs::read(&rp).map_err(err_s)?,
                report,
            ));
        }
        let (a, b) = (&artifacts[0], &artifacts[1]);
        ensure!(a.0 == b.0, "checkpoints differ between identical runs");
        ensure!(a.1 == b.1, "loss traces differ between identical runs");
        ensure!(a.2 == b.2, "evaluation CSVs differ between identical runs");
        ensure!(a.3 == b.3, "evaluation reports differ between identical runs");
        Ok(())
    });
}
