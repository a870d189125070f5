use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use hiremlp::accounting::{ablation_cost_sweep, count_model, relative_deviation, CostReport};
use hiremlp::gradcheck::{check_layer_gradients, GRAD_REL_TOL};
use hiremlp::init::random_map;
use hiremlp::invariants::run_scope;
use hiremlp::network::{forward as run_forward, Model, ModelConfig, BUILTIN_NAMES};
use hiremlp::ops::NormMode;
use hiremlp::rearrange::{preserves_cyclic_order, token_permutation, PaddingMode, ShiftManner, ShiftSpec};
use hiremlp::serialize::load_raw;
use hiremlp::FeatureMap;
use rayon::prelude::*;
use serde_json::json;

use crate::ModelArgs;

const WARMUP: usize = 5;
const BUDGET_TOL: f64 = 0.05;

fn load_config(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        return ModelConfig::from_path(path).with_context(|| spec.to_string());
    }
    if BUILTIN_NAMES.contains(&spec) {
        return Ok(ModelConfig::builtin(spec)?);
    }
    bail!("{spec}: no such config file or builtin (builtins: {})", BUILTIN_NAMES.join(", "))
}

fn parse_dims(text: &str, n: usize) -> Result<Vec<usize>> {
    let dims = text
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .ok()
        .filter(|d| d.len() == n && d.iter().all(|&v| v > 0));
    dims.with_context(|| format!("expected {n} positive integers separated by 'x', got `{text}`"))
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    match text.parse::<usize>() {
        Ok(s) if s > 0 => Ok((s, s)),
        _ => parse_dims(text, 2).map(|d| (d[0], d[1])),
    }
}

/// Token grid entering each stage.
fn stage_grids(cfg: &ModelConfig, height: usize, width: usize) -> Vec<(usize, usize)> {
    let (mut h, mut w) = (height, width);
    cfg.patch_embed
        .iter()
        .map(|p| {
            h = h.div_ceil(p.stride);
            w = w.div_ceil(p.stride);
            (h, w)
        })
        .collect()
}

fn fmt_m(v: u64) -> String {
    format!("{:.2}M", v as f64 / 1e6)
}

fn fmt_g(v: u64) -> String {
    format!("{:.2}G", v as f64 / 1e9)
}

fn probe_input(height: usize, width: usize, channels: usize, seed: u64) -> FeatureMap<f32> {
    random_map(vec![1, height, width, channels], seed.wrapping_add(1), 1.0)
}

fn bitwise_eq(a: &FeatureMap<f32>, b: &FeatureMap<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn summary(args: &ModelArgs) -> Result<bool> {
    let cfg = load_config(&args.config)?;
    let (h, w) = parse_size(&args.size)?;
    let report = count_model(&Model::<f32>::zeroed(&cfg)?, h, w)?;
    let grids = stage_grids(&cfg, h, w);

    let stages: Vec<_> = cfg
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = report.filter(&format!("stages.{i}"));
            json!({
                "stage": i + 1, "depth": s.depth, "channels": s.channels,
                "h": s.h, "w": s.w, "s": s.s, "padding": s.padding.name(),
                "tokens": [grids[i].0, grids[i].1], "params": r.params, "flops": r.flops,
            })
        })
        .collect();
    let head = report.filter("head");

    // budgets are quoted at 224x224
    let budget = cfg.reference.filter(|_| (h, w) == (224, 224)).map(|b| {
        let dp = relative_deviation(report.params as f64, b.params as f64);
        let df = relative_deviation(report.flops as f64, b.flops as f64);
        (b, dp, df, dp < BUDGET_TOL && df < BUDGET_TOL)
    });
    let pass = budget.is_none_or(|b| b.3);

    if args.json {
        let out = json!({
            "name": cfg.name, "reconstructed": cfg.reconstructed, "resolution": [h, w],
            "depths": cfg.depths(), "stages": stages,
            "head": {"params": head.params, "flops": head.flops},
            "params": report.params, "flops": report.flops,
            "budget": budget.map(|(b, dp, df, ok)| json!({
                "params": b.params, "flops": b.flops,
                "params_deviation": dp, "flops_deviation": df, "pass": ok,
            })),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(pass);
    }

    let name = cfg.name.as_deref().unwrap_or(&args.config);
    let tag = if cfg.reconstructed { " (reconstructed)" } else { "" };
    println!("{name}{tag} at {h}x{w}");
    let depths: Vec<String> = cfg.depths().iter().map(|d| d.to_string()).collect();
    println!("depths: {}", depths.join(","));
    println!(
        "{:<6} {:>5} {:>8} {:>3} {:>3} {:>3} {:>9} {:>9} {:>12} {:>14}",
        "stage", "depth", "channels", "h", "w", "s", "padding", "tokens", "params", "flops"
    );
    for (i, s) in cfg.stages.iter().enumerate() {
        let r = report.filter(&format!("stages.{i}"));
        println!(
            "{:<6} {:>5} {:>8} {:>3} {:>3} {:>3} {:>9} {:>9} {:>12} {:>14}",
            i + 1,
            s.depth,
            s.channels,
            s.h,
            s.w,
            s.s,
            s.padding.name(),
            format!("{}x{}", grids[i].0, grids[i].1),
            r.params,
            r.flops
        );
    }
    println!("{:<6} {:>59} {:>14}", "head", head.params, head.flops);
    println!("total: {} params, {} FLOPs", fmt_m(report.params), fmt_g(report.flops));
    if let Some((b, dp, df, ok)) = budget {
        println!(
            "budget {} / {}: deviation {:.1}% / {:.1}% {}",
            fmt_m(b.params),
            fmt_g(b.flops),
            dp * 100.0,
            df * 100.0,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(pass)
}

pub fn forward(
    args: &ModelArgs,
    weights: Option<&Path>,
    random: Option<&str>,
    input: Option<&Path>,
    seed: u64,
    topk: usize,
) -> Result<bool> {
    let cfg = load_config(&args.config)?;
    let mut model = Model::<f32>::build(&cfg, seed)?;
    if let Some(p) = weights {
        model.load_weights(p).with_context(|| format!("{}", p.display()))?;
    }
    let x = match (random, input) {
        (Some(spec), _) => {
            let d = parse_dims(spec, 3)?;
            probe_input(d[0], d[1], d[2], seed)
        }
        (None, Some(p)) => {
            let t = load_raw::<f32>(p).with_context(|| format!("{}", p.display()))?;
            if t.rank() == 3 {
                let shape = [&[1], t.shape()].concat();
                t.reshape(shape)?
            } else {
                t
            }
        }
        (None, None) => bail!("one of --random HxWxC or --input PATH is required"),
    };
    let logits = run_forward(&x, &model)?;
    let classes = logits.last_dim();
    let k = topk.min(classes);

    let mut images = Vec::new();
    for (n, row) in logits.data().chunks(classes).enumerate() {
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        let top: Vec<(usize, f32)> = order[..k].iter().map(|&i| (i, row[i])).collect();
        images.push((n, top));
    }

    if args.json {
        let out = json!({
            "input": x.shape(), "logits": logits.shape(),
            "checksum": format!("{:016x}", logits.checksum()),
            "topk": images.iter().map(|(_, top)| {
                top.iter().map(|(i, v)| json!({"index": i, "logit": v})).collect::<Vec<_>>()
            }).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(true);
    }
    println!("input {:?} -> logits {:?}", x.shape(), logits.shape());
    for (n, top) in images {
        println!("image {n}:");
        for (rank, (i, v)) in top.iter().enumerate() {
            println!("  #{:<2} class {i:>5}  logit {v:>12.6}", rank + 1);
        }
    }
    println!("checksum {:016x}", logits.checksum());
    Ok(true)
}

pub fn invariants(scope: &str, seeds: usize, seed: u64, json_out: bool) -> Result<bool> {
    ensure!(seeds > 0, "--seeds must be positive");
    let results = run_scope(scope, seeds, seed)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if json_out {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            print!("{status} {}/{} ({} cases)", r.scope, r.name, r.cases);
            match &r.detail {
                Some(d) => println!(": {d}"),
                None => println!(),
            }
        }
        println!("{} properties, {failed} failed", results.len());
    }
    Ok(failed == 0)
}

pub fn gradcheck(config: Option<&str>, random: &str, samples: usize, seed: u64, json_out: bool) -> Result<bool> {
    let mut cfg = match config {
        Some(c) => load_config(c)?,
        None => ModelConfig::micro(2),
    };
    // running statistics make the normalization constant; use the batch
    if cfg.norm_mode != NormMode::BatchStatistics {
        cfg.norm_mode = NormMode::BatchStatistics;
        if !json_out {
            println!("note: normalization switched to batch statistics");
        }
    }
    let d = parse_dims(random, 3)?;
    let x = random_map::<f64>(vec![1, d[0], d[1], d[2]], seed.wrapping_add(1), 1.0);
    let mut model = Model::<f64>::build(&cfg, seed)?;
    let start = Instant::now();
    let report = check_layer_gradients(&mut model, &x, samples, seed)?;
    let elapsed = start.elapsed();
    let pass = report.passed();

    if json_out {
        let worst = report.worst.as_ref().map(|w| {
            json!({"coordinate": w.label, "analytic": w.analytic, "numeric": w.numeric})
        });
        let out = json!({
            "checked": report.checked, "max_rel_error": report.max_rel_error,
            "tolerance": GRAD_REL_TOL, "floor": report.floor, "worst": worst,
            "seconds": elapsed.as_secs_f64(), "pass": pass,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(pass);
    }
    println!("checked {} coordinates in {elapsed:.2?}", report.checked);
    println!("max relative error {:.3e} (tolerance {GRAD_REL_TOL:e})", report.max_rel_error);
    if let Some(w) = &report.worst {
        println!("worst {}: analytic {:.6e}, numeric {:.6e}", w.label, w.analytic, w.numeric);
    }
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

pub fn bench(args: &ModelArgs, batch: usize, iters: usize, threads: &[usize], seed: u64) -> Result<bool> {
    ensure!(iters > WARMUP, "--iters must exceed the {WARMUP} warmup iterations");
    ensure!(batch > 0, "--batch must be positive");
    ensure!(!threads.is_empty() && threads.iter().all(|&t| t > 0), "--threads must be positive");
    let cfg = load_config(&args.config)?;
    let (h, w) = parse_size(&args.size)?;
    let model = Model::<f32>::build(&cfg, seed)?;
    let inputs: Vec<FeatureMap<f32>> =
        (0..batch as u64).map(|i| probe_input(h, w, cfg.in_channels, seed.wrapping_add(i))).collect();

    let mut rows = Vec::new();
    for &t in threads {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build()?;
        let mut times = Vec::with_capacity(iters);
        let mut checksum = None;
        for _ in 0..iters {
            let start = Instant::now();
            let outs = pool.install(|| {
                inputs.par_iter().map(|x| run_forward(x, &model)).collect::<hiremlp::Result<Vec<_>>>()
            })?;
            times.push(start.elapsed().as_secs_f64());
            let sum = outs.iter().fold(0u64, |acc, y| acc.rotate_left(7) ^ y.checksum());
            if *checksum.get_or_insert(sum) != sum {
                bail!("outputs changed between iterations with {t} threads");
            }
        }
        let mut measured = times.split_off(WARMUP);
        measured.sort_by(f64::total_cmp);
        let median = measured[measured.len() / 2];
        rows.push((t, batch as f64 / median, median * 1e3 / batch as f64, checksum.unwrap_or(0)));
    }
    let consistent = rows.iter().all(|r| r.3 == rows[0].3);

    if args.json {
        let out = json!({
            "resolution": [h, w], "batch": batch, "iters": iters, "warmup": WARMUP,
            "runs": rows.iter().map(|&(t, ips, ms, c)| json!({
                "threads": t, "images_per_second": ips, "ms_per_image": ms,
                "checksum": format!("{c:016x}"),
            })).collect::<Vec<_>>(),
            "consistent": consistent,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        for (t, ips, ms, c) in &rows {
            println!("threads {t:>2}: {ips:>9.2} images/s  {ms:>9.2} ms/image  checksum {c:016x}");
        }
        if !consistent {
            println!("FAIL outputs differ across thread counts");
        }
    }
    Ok(consistent)
}

fn print_or_json(args: &ModelArgs, table: &str, value: serde_json::Value) -> Result<()> {
    if args.json {
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        print!("{table}");
    }
    Ok(())
}

fn costs(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    Ok(count_model(&Model::<f32>::zeroed(cfg)?, h, w)?)
}

pub fn ablate_padding(args: &ModelArgs, seed: u64) -> Result<bool> {
    let base = load_config(&args.config)?;
    let (h, w) = parse_size(&args.size)?;
    let grids = stage_grids(&base, h, w);
    let x = probe_input(h, w, base.in_channels, seed);

    let mut table = format!("{:<10} {:>12} {:>14} {:>18}  {}\n", "padding", "params", "flops", "checksum", "padded grids");
    let mut rows = Vec::new();
    for mode in PaddingMode::ALL {
        let mut cfg = base.clone();
        cfg.stages.iter_mut().for_each(|s| s.padding = mode);
        let r = costs(&cfg, h, w)?;
        let y = run_forward(&x, &Model::<f32>::build(&cfg, seed)?)?;
        let padded: Vec<String> = cfg
            .stages
            .iter()
            .zip(&grids)
            .map(|(s, &(gh, gw))| format!("{}x{}", gh.next_multiple_of(s.h), gw.next_multiple_of(s.w)))
            .collect();
        table.push_str(&format!(
            "{:<10} {:>12} {:>14} {:>18}  {}\n",
            mode.name(),
            r.params,
            r.flops,
            format!("{:016x}", y.checksum()),
            padded.join(" ")
        ));
        rows.push((mode, r.params, r.flops, y.checksum(), padded));
    }
    let same_cost = rows.iter().all(|r| r.1 == rows[0].1 && r.2 == rows[0].2);
    table.push_str(&format!(
        "padding adds no parameters or FLOPs: {}\n",
        if same_cost { "PASS" } else { "FAIL" }
    ));
    let value = json!({
        "resolution": [h, w],
        "variants": rows.iter().map(|(m, p, f, c, padded)| json!({
            "padding": m.name(), "params": p, "flops": f,
            "checksum": format!("{c:016x}"), "padded_grids": padded,
        })).collect::<Vec<_>>(),
        "same_cost": same_cost,
    });
    print_or_json(args, &table, value)?;
    Ok(same_cost)
}

pub fn ablate_manner(args: &ModelArgs) -> Result<bool> {
    let base = load_config(&args.config)?;
    let (h, w) = parse_size(&args.size)?;
    let grids = stage_grids(&base, h, w);

    let mut table = format!(
        "{:<6} {:<7} {:>7} {:>7} {:>7} {:>16} {:>16}\n",
        "stage", "axis", "extent", "region", "groups", "shifted ordered", "shuffle ordered"
    );
    let mut rows = Vec::new();
    let mut ok = true;
    for (i, s) in base.stages.iter().enumerate() {
        let (rh, rw) = base.effective_regions(i);
        for (axis, extent, region) in [("height", grids[i].0, rh), ("width", grids[i].1, rw)] {
            let padded = extent.next_multiple_of(region);
            let groups = padded / region;
            let shifted = token_permutation(padded, &ShiftSpec::shifted(s.s % padded), region)?;
            let shuffle = token_permutation(padded, &ShiftSpec::shuffle(), region)?;
            let (keeps, shuffle_keeps) = (preserves_cyclic_order(&shifted), preserves_cyclic_order(&shuffle));
            // with a single group or unit regions the shuffle is the identity
            let expected_shuffle = groups == 1 || region == 1;
            ok &= keeps && shuffle_keeps == expected_shuffle;
            table.push_str(&format!(
                "{:<6} {:<7} {:>7} {:>7} {:>7} {:>16} {:>16}\n",
                i + 1,
                axis,
                padded,
                region,
                groups,
                keeps,
                shuffle_keeps
            ));
            rows.push(json!({
                "stage": i + 1, "axis": axis, "extent": padded, "region": region, "groups": groups,
                "shifted_preserves_order": keeps, "shuffle_preserves_order": shuffle_keeps,
            }));
        }
    }
    let mut cost = Vec::new();
    for manner in [ShiftManner::Shifted, ShiftManner::Shuffle] {
        let r = costs(&ModelConfig { manner, ..base.clone() }, h, w)?;
        table.push_str(&format!("{:<8} {} params, {} FLOPs\n", manner.name(), r.params, r.flops));
        cost.push((r.params, r.flops));
    }
    let same_cost = cost[0] == cost[1];
    ok &= same_cost;
    table.push_str(&format!(
        "shifted keeps cyclic order, shuffle breaks it, equal cost: {}\n",
        if ok { "PASS" } else { "FAIL" }
    ));
    print_or_json(args, &table, json!({"resolution": [h, w], "axes": rows, "same_cost": same_cost, "pass": ok}))?;
    Ok(ok)
}

pub fn ablate_shift(args: &ModelArgs, steps: Option<&[usize]>, seed: u64) -> Result<bool> {
    let base = load_config(&args.config)?;
    let (h, w) = parse_size(&args.size)?;
    let n = base.stages.len();
    let variants: Vec<Vec<usize>> = match steps {
        Some(s) => {
            ensure!(s.len() == n, "--steps needs {n} values, got {}", s.len());
            vec![s.to_vec()]
        }
        None => {
            let mut v = vec![vec![0; n], vec![1; n], base.stages.iter().map(|s| s.s).collect()];
            v.dedup();
            v
        }
    };
    let grids = stage_grids(&base, h, w);
    let x = probe_input(h, w, base.in_channels, seed);
    let mut disabled = base.clone();
    disabled.toggles.cross_rearrange = false;
    let reference = run_forward(&x, &Model::<f32>::build(&disabled, seed)?)?;

    let mut table = format!("{:<12} {:>12} {:>14}  {:<44} {}\n", "steps", "params", "flops", "structure", "contract");
    let mut rows = Vec::new();
    let mut ok = true;
    for v in &variants {
        let mut cfg = base.clone();
        cfg.stages.iter_mut().zip(v).for_each(|(s, &step)| s.s = step);
        let mixing: Vec<bool> = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (rh, rw) = cfg.effective_regions(i);
                let (ph, pw) = (grids[i].0.next_multiple_of(rh), grids[i].1.next_multiple_of(rw));
                cfg.toggles.cross_rearrange && (s.s % ph != 0 || s.s % pw != 0)
            })
            .collect();
        let communicates = mixing.iter().any(|&m| m);
        let y = run_forward(&x, &Model::<f32>::build(&cfg, seed)?)?;
        // without any effective step the model must coincide with the disabled one
        let contract = bitwise_eq(&y, &reference) != communicates;
        ok &= contract;
        let r = costs(&cfg, h, w)?;
        let structure = if communicates {
            let stages: Vec<String> = (1..=n).filter(|&i| mixing[i - 1]).map(|i| i.to_string()).collect();
            format!("cross-region communication in stages {}", stages.join(","))
        } else {
            "no cross-region communication".to_string()
        };
        let label = v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        table.push_str(&format!(
            "{:<12} {:>12} {:>14}  {:<44} {}\n",
            format!("({label})"),
            r.params,
            r.flops,
            structure,
            if contract { "PASS" } else { "FAIL" }
        ));
        rows.push(json!({
            "steps": v, "params": r.params, "flops": r.flops, "cross_region_communication": communicates,
            "mixing_stages": mixing, "equals_disabled": !communicates == contract, "pass": contract,
        }));
    }
    print_or_json(args, &table, json!({"resolution": [h, w], "variants": rows, "pass": ok}))?;
    Ok(ok)
}

pub fn ablate_fc(args: &ModelArgs) -> Result<bool> {
    let base = load_config(&args.config)?;
    let (h, w) = parse_size(&args.size)?;
    let sweep = ablation_cost_sweep(&base, &[1, 2, 3, 4], h, w)?;
    let p: Vec<u64> = sweep.iter().map(|(_, r)| r.params).collect();
    let two = p[1] as i64;

    let mut table = format!("{:<10} {:>12} {:>14} {:>12}\n", "fc layers", "params", "flops", "vs 2-FC");
    for (k, r) in &sweep {
        table.push_str(&format!("{k:<10} {:>12} {:>14} {:>+12}\n", r.params, r.flops, r.params as i64 - two));
    }
    let ordered = p[0] > p[1] && p[0] > p[3] && p[2] < p[1] && p[2] < p[3];
    table.push_str(&format!(
        "1-FC largest, 3-FC smallest: {}\n",
        if ordered { "PASS" } else { "FAIL" }
    ));
    let value = json!({
        "resolution": [h, w],
        "variants": sweep.iter().map(|(k, r)| json!({"fc_layers": k, "params": r.params, "flops": r.flops}))
            .collect::<Vec<_>>(),
        "ordered": ordered,
    });
    print_or_json(args, &table, value)?;
    Ok(ordered)
}
