//! Text summaries of output directories.

use std::fmt::Write;
use std::path::Path;

use crate::ablation::{MosfAblation, TanqAblation};
use crate::error::{CliError, Result};
use crate::output::read_json;
use crate::run::RunDocument;

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn run_summary(doc: &RunDocument, s: &mut String) {
    let r = &doc.report;
    let t = &doc.config.pipeline.template;
    let _ = writeln!(
        s,
        "run: seed {}, W{}A{}, post-Softmax {}, shared factor {}, outlier factor {}",
        doc.config.seed,
        t.bits_w,
        t.bits_a,
        t.softmax,
        r.select.name(),
        doc.config.outlier_factor
    );
    for (name, blocks) in [("stage 1", &r.stage1), ("stage 3", &r.stage3)] {
        for b in blocks {
            let _ = writeln!(
                s,
                "  {name} block {}: loss {:.6} -> {:.6} ({} updates, {} passes)",
                b.block, b.initial_loss, b.final_loss, b.accepted, b.passes
            );
        }
    }
    for site in &r.stage2 {
        let _ = writeln!(
            s,
            "  stage 2 block {} {}: s~ {:.6} (mean {:.6}), z~ {}, codes {}/{}",
            site.block,
            site.site.name(),
            site.s_tilde,
            site.s_mean,
            site.z_tilde,
            site.equivalence.codes_matching,
            site.equivalence.codes_total
        );
    }
    let _ = writeln!(
        s,
        "  held-out: top-1 agreement {:.4}, block mse {:?}",
        r.eval.top1_agreement, r.eval.block_mse
    );
    let c = &doc.checks;
    let _ = writeln!(
        s,
        "  checks: traces {}, reparameterization {}, stage-2 drift {:e}, median MAD {}",
        verdict(c.traces_nonincreasing),
        verdict(c.reparam_equivalent),
        c.stage2_max_rel_delta,
        verdict(c.median_mad_minimal)
    );
}

/// Summarizes every known result file found in `dir`.
pub fn summarize(dir: &Path) -> Result<String> {
    let mut s = String::new();
    let mut found = false;
    let report = dir.join("report.json");
    if report.exists() {
        found = true;
        run_summary(&read_json::<RunDocument>(&report)?, &mut s);
    }
    let tanq = dir.join("ablation_tanq.json");
    if tanq.exists() {
        found = true;
        let a: TanqAblation = read_json(&tanq)?;
        let _ = writeln!(s, "post-Softmax ablation, seed {}:", a.seed);
        for r in a.rows.iter().chain(&a.control) {
            let _ = writeln!(
                s,
                "  {:>8} a{}: agreement {:.4}, block mse {:.6}",
                r.quantizer.name(),
                r.bits_a,
                r.top1_agreement,
                r.mean_block_mse
            );
        }
        for c in &a.checks {
            let _ = writeln!(s, "  {}: {}", c.claim, verdict(c.holds));
        }
    }
    let mosf = dir.join("ablation_mosf.json");
    if mosf.exists() {
        found = true;
        let a: MosfAblation = read_json(&mosf)?;
        let _ = writeln!(s, "shared-factor ablation, seed {}, W{}A{}:", a.seed, a.bits_w, a.bits_a);
        for e in &a.entries {
            let _ = writeln!(
                s,
                "  factor {}: median {:.6e} vs mean {:.6e} (relative {:+.3e}), agreement {:.4} vs {:.4}",
                e.factor,
                e.ab.mosf_mean_block_mse,
                e.ab.repq_mean_block_mse,
                e.ab.rel_diff,
                e.ab.mosf.eval.top1_agreement,
                e.ab.repq.eval.top1_agreement
            );
        }
        for c in &a.checks {
            let _ = writeln!(s, "  {}: {}", c.claim, verdict(c.holds));
        }
    }
    let sweep = dir.join("sweep.json");
    if sweep.exists() {
        found = true;
        let v: serde_json::Value = read_json(&sweep)?;
        let _ = writeln!(s, "quantizer sweep:");
        for r in v["rows"].as_array().into_iter().flatten() {
            let _ = writeln!(s, "  {:>8} b={}: mse {}", r["quantizer"], r["bitwidth"], r["mse"]);
        }
        for c in v["checks"].as_array().into_iter().flatten() {
            let _ = writeln!(s, "  {}: {}", c["claim"], verdict(c["holds"].as_bool() == Some(true)));
        }
    }
    if !found {
        return Err(CliError::Data(format!("no result files in {}", dir.display())));
    }
    Ok(s)
}
