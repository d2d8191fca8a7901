use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::tape::Tape;

use super::train::{batch_objective, Instance, Mode};
use super::{Model, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per checked parameter tensor.
    pub per_parameter: Vec<(String, f64)>,
    pub entries_checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients of the full multi-task objective on `batch` with
/// central differences, for every parameter whose name passes `select`.
pub fn grad_check(
    model: &Model,
    batch: &[Instance],
    epsilon: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport, ModelError> {
    let refs: Vec<&Instance> = batch.iter().collect();
    let objective = |m: &Model| -> Result<f64, ModelError> {
        let mut tape = Tape::new(m.params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(batch_objective(m, &mut tape, &refs, Mode::Mtl, 1.0, &mut rng)?.1.total)
    };
    let mut grads = model.params().zero_grads();
    {
        let mut tape = Tape::new(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (root, _) = batch_objective(model, &mut tape, &refs, Mode::Mtl, 1.0, &mut rng)?;
        tape.backward(root, 1.0, &mut grads);
    }
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_parameter: Vec::new(),
        entries_checked: 0,
    };
    for id in model.params().ids() {
        let name = model.params().name(id);
        if !select(name) {
            continue;
        }
        let shape = model.params().get(id).raw_dim();
        let mut worst: f64 = 0.0;
        for r in 0..shape[0] {
            for c in 0..shape[1] {
                let orig = model.params().get(id)[[r, c]];
                probe.params_mut().get_mut(id)[[r, c]] = orig + epsilon;
                let up = objective(&probe)?;
                probe.params_mut().get_mut(id)[[r, c]] = orig - epsilon;
                let down = objective(&probe)?;
                probe.params_mut().get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * epsilon);
                worst = worst.max(relative_error(grads.get(id)[[r, c]], numeric));
                report.entries_checked += 1;
            }
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_parameter.push((name.to_string(), worst));
    }
    Ok(report)
}
