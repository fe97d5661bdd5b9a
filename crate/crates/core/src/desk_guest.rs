//! Directive-driven guest used by offline runs.
//!
//! Desk solver programs are ordinary text whose behaviour is selected by lines of the
//! form `# desk: key=value [key=value ...]`. The interpreter maps them onto the reference
//! solvers so that tournaments, debugging and reports can be exercised without an
//! external toolchain. It always runs as a separate process under the harness.
//!
//! Recognized keys: `method=reference`, `splitting=strang|lie`,
//! `reaction=stable|naive|euler`, `dt_factor`, `eps`, `oversample`,
//! `scheme=exact_spectral|second_order_fv`, `cfl`, and the faults
//! `fault=nan|shape|partial|crash|sleep` (with `sleep=<seconds>`).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::domain::{PdeTask, SolutionField, TaskId};
use crate::harness::{assemble_inputs, GuestManifest};
use crate::reference::{
    dt_max_diffusion, solve_advection, solve_reaction_diffusion, solve_reference, AdvectionScheme, ReactionFormula,
    RdOptions, ReferenceConfig, Splitting,
};
use crate::tensor;

/// Directive values in source order; later assignments win.
pub fn directives(source: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in source.lines() {
        let Some(rest) = line.trim_start().strip_prefix("# desk:") else { continue };
        for pair in rest.split_whitespace() {
            if let Some((k, v)) = pair.split_once('=') {
                out.insert(k.to_string(), v.to_string());
            }
        }
    }
    out
}

fn number(d: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64, String> {
    match d.get(key) {
        Some(v) => v.parse().map_err(|_| format!("directive {key}={v} is not a number")),
        None => Ok(default),
    }
}

fn rd_options(d: &BTreeMap<String, String>) -> Result<(RdOptions, usize), String> {
    let splitting = match d.get("splitting").map(String::as_str) {
        None | Some("strang") => Splitting::Strang,
        Some("lie") => Splitting::Lie,
        Some(other) => return Err(format!("unknown splitting '{other}'")),
    };
    let reaction = match d.get("reaction").map(String::as_str) {
        None | Some("stable") => ReactionFormula::Stable { eps: number(d, "eps", 1e-300)? },
        Some("naive") => ReactionFormula::Naive,
        Some("euler") => ReactionFormula::ExplicitEuler,
        Some(other) => return Err(format!("unknown reaction '{other}'")),
    };
    let dt_factor = number(d, "dt_factor", 1.0)?;
    let oversample = number(d, "oversample", 1.0)? as usize;
    Ok((RdOptions { splitting, reaction, dt_factor }, oversample.max(1)))
}

fn solve(task: &PdeTask, manifest: &GuestManifest, inputs: &SolutionField, d: &BTreeMap<String, String>) -> Result<SolutionField, String> {
    let grid = &manifest.grid;
    let generic = d.get("method").is_some_and(|m| m == "reference");
    match task.task_id() {
        TaskId::ReactionDiffusion if !generic => {
            let (opts, oversample) = rd_options(d)?;
            let (nu, rho) = (task.param("nu"), task.param("rho"));
            let dx = grid.dx() / oversample as f64;
            let dt_max = dt_max_diffusion(dx, nu, 1.0).map_err(|e| e.to_string())? * opts.dt_factor;
            println!("Stability-based dt_max = {dt_max:.2e}");
            let times = &grid.t_coordinates;
            if let Some(w) = times.windows(2).next() {
                println!("Using {} internal time steps", ((w[1] - w[0]) / dt_max).ceil().max(1.0) as u64);
            }
            let (field, stats) =
                solve_reaction_diffusion(nu, rho, grid, inputs, oversample, &opts).map_err(|e| e.to_string())?;
            let t = times.len().saturating_sub(1);
            let per = stats.internal_steps / t.max(1);
            for i in 1..=t {
                println!("Time step {i}/{t} completed (internal steps: {})", per * i);
            }
            Ok(field)
        }
        TaskId::Advection if d.contains_key("scheme") || d.contains_key("cfl") => {
            let scheme = match d.get("scheme").map(String::as_str) {
                None | Some("exact_spectral") => AdvectionScheme::ExactSpectral,
                Some("second_order_fv") => AdvectionScheme::SecondOrderFv,
                Some(other) => return Err(format!("unknown scheme '{other}'")),
            };
            solve_advection(task.param("beta"), grid, inputs, scheme, number(d, "cfl", 0.5)?).map_err(|e| e.to_string())
        }
        _ => solve_reference(task, grid, inputs, &ReferenceConfig::for_task(task.task_id())).map_err(|e| e.to_string()),
    }
}

/// Interprets `source` against the harness manifest at `manifest_path`.
pub fn run_desk_guest(source_path: &Path, manifest_path: &Path) -> Result<(), String> {
    let source = std::fs::read_to_string(source_path).map_err(|e| format!("{}: {e}", source_path.display()))?;
    let text = std::fs::read_to_string(manifest_path).map_err(|e| format!("{}: {e}", manifest_path.display()))?;
    let manifest: GuestManifest = serde_json::from_str(&text).map_err(|e| format!("manifest: {e}"))?;
    let d = directives(&source);
    let fault = d.get("fault").map(String::as_str);
    match fault {
        Some("crash") => {
            return Err("Traceback (most recent call last):\n  File \"solver.py\", line 1\nRuntimeError: desk fault".into())
        }
        Some("sleep") => std::thread::sleep(std::time::Duration::from_secs_f64(number(&d, "sleep", 3600.0)?)),
        _ => {}
    }
    let task = PdeTask::new(manifest.task_id, &manifest.params).map_err(|e| e.to_string())?;
    let mut tensors = BTreeMap::new();
    for (name, path) in &manifest.input_paths {
        tensors.insert(name.clone(), tensor::load(Path::new(path)).map_err(|e| format!("{path}: {e}"))?);
    }
    let inputs = assemble_inputs(&task, &tensors).ok_or("manifest lacks a solver input")?;
    let mut data = solve(&task, &manifest, &inputs, &d)?.data;
    let out = Path::new(&manifest.output_path);
    match fault {
        Some("nan") => {
            if let Some(v) = data.iter_mut().last() {
                *v = f64::NAN;
            }
        }
        Some("shape") if task.time_dependent() => {
            let steps = data.shape()[1];
            data = data.slice_axis(Axis(1), (1..steps).into()).to_owned();
        }
        Some("shape") => data = ArrayD::zeros(IxDyn(&[1])),
        Some("partial") => {
            let bytes = tensor::encode(&data).map_err(|e| e.to_string())?;
            let mut f = std::fs::File::create(out).map_err(|e| e.to_string())?;
            f.write_all(&bytes[..bytes.len() / 2]).map_err(|e| e.to_string())?;
            return Ok(());
        }
        _ => {}
    }
    tensor::store(out, &data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directive_lines() {
        let d = directives("import numpy as np\n# desk: splitting=lie dt_factor=0.5\n  # desk: fault=nan\nx = 1 # desk: no\n");
        assert_eq!(d.get("splitting").unwrap(), "lie");
        assert_eq!(d.get("dt_factor").unwrap(), "0.5");
        assert_eq!(d.get("fault").unwrap(), "nan");
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn reaction_choices() {
        let d = directives("# desk: reaction=naive oversample=2");
        let (opts, over) = rd_options(&d).unwrap();
        assert_eq!(opts.reaction, ReactionFormula::Naive);
        assert_eq!(over, 2);
        assert!(rd_options(&directives("# desk: reaction=magic")).is_err());
    }
}
