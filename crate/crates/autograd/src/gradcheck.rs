//! Central finite-difference verification of recorded graphs.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Absolute denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// The floor is raised to this fraction of the largest analytic gradient
    /// entry over all checked inputs. Components that far below the gradient
    /// scale sit under the resolution of a central difference.
    pub scale_floor: f64,
    /// Check at most this many coordinates per input, sampled without replacement.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-6, floor: 1e-6, scale_floor: 1e-6, max_coords_per_input: None, seed: 0x5eed }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink (ReLU zero, knot, clamp,
    /// pooling switch). These are flagged and excluded, not failed.
    pub skipped: Vec<usize>,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    /// Effective denominator floor used for every coordinate.
    pub floor: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped.len()).sum()
    }

    pub fn passed(&self) -> bool {
        self.checked() > 0 && self.max_rel_error() < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.inputs {
            writeln!(
                f,
                "  {:<40} checked {:>5}  skipped {:>3}  max_rel_err {:.3e}",
                r.name,
                r.checked,
                r.skipped.len(),
                r.max_rel_error
            )?;
        }
        write!(
            f,
            "  max relative error {:.3e} (tolerance {:.0e}, floor {:.1e}): {}",
            self.max_rel_error(),
            self.tolerance,
            self.floor,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Compares analytic gradients of `output` with central differences for the
/// given leaves.
///
/// Non-scalar outputs are reduced with a fixed random projection. Requires a
/// 64-bit graph; the graph is replayed back to its original values on return.
pub fn grad_check(
    graph: &mut Graph<f64>,
    output: Var,
    inputs: &[Var],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !graph.is_evaluated() {
        graph.replay()?;
    }
    let mut rng = SplitMix(opts.seed);
    let out_shape = graph.value(output).shape().to_vec();
    let projection = Tensor::from_fn(out_shape, |_| rng.unit() * 2.0 - 1.0);
    let objective = |g: &Graph<f64>| -> f64 {
        g.value(output).data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
    };

    graph.backward(output, &projection)?;
    let base_kinks = graph.kink_signature();
    let grad_scale = inputs
        .iter()
        .filter_map(|&v| graph.grad(v))
        .flat_map(|g| g.iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    let floor = opts.floor.max(opts.scale_floor * grad_scale);
    let mut reports = Vec::with_capacity(inputs.len());
    for &input in inputs {
        if !graph.is_leaf(input) || !graph.requires_grad(input) {
            return Err(TensorError::InvalidArgument {
                op: "grad_check",
                detail: format!("node {} is not a differentiable leaf", input.index()),
            });
        }
        let name = graph
            .input_names()
            .find(|(_, v)| *v == input)
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| format!("%{}", input.index()));
        let original = graph.value(input).clone();
        let analytic = graph.grad(input).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; original.numel()]);

        let mut coords: Vec<usize> = (0..original.numel()).collect();
        if let Some(limit) = opts.max_coords_per_input {
            for i in 0..coords.len().min(limit) {
                let j = i + (rng.next() as usize) % (coords.len() - i);
                coords.swap(i, j);
            }
            coords.truncate(limit);
        }

        let mut report = InputReport { name, checked: 0, skipped: Vec::new(), max_rel_error: 0.0, worst_index: None };
        for idx in coords {
            let eval_at = |delta: f64, graph: &mut Graph<f64>| -> Result<(f64, u64)> {
                let mut t = original.clone();
                t.data_mut()[idx] += delta;
                graph.set_value(input, t)?;
                graph.replay()?;
                Ok((objective(graph), graph.kink_signature()))
            };
            let (fp, kp) = eval_at(opts.step, graph)?;
            let (fm, km) = eval_at(-opts.step, graph)?;
            if kp != base_kinks || km != base_kinks {
                report.skipped.push(idx);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_index = Some(idx);
            }
        }
        graph.set_value(input, original)?;
        graph.replay()?;
        reports.push(report);
    }
    graph.backward(output, &projection)?;
    Ok(GradCheckReport { inputs: reports, tolerance: opts.tolerance, floor })
}
