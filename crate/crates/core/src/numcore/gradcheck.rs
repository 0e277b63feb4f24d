use super::{Graph, NumError, Result, Tensor, Var};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over every coordinate.
    pub max_rel_error: f64,
    /// Coordinates whose central differences at `step` and `step / 2` disagree,
    /// i.e. where a kink (ReLU, clamp, top-k switch) lies within the step. The
    /// screen uses function values only.
    pub nonsmooth: usize,
    /// Maximum error over the coordinates that passed the screen; equals
    /// `max_rel_error` when the screen is off.
    pub smooth_max_rel_error: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn is_smooth(&self) -> bool {
        self.nonsmooth == 0
    }

    pub fn nonsmooth_fraction(&self) -> f64 {
        self.nonsmooth as f64 / self.coordinates.max(1) as f64
    }
}

/// Largest discrepancy between tape gradients and central differences.
///
/// `f` builds a scalar on a fresh graph from the given leaves. The error for
/// one coordinate is `|analytic - numeric| / max(1, |analytic|)`; the maximum
/// over every coordinate of every input is returned.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<NumError>,
{
    run(f, inputs, step, false).map(|r| r.max_rel_error)
}

/// [`grad_check_many`] plus a smoothness screen of the instance.
pub fn grad_check_report<F, E>(f: F, inputs: &[Tensor], step: f64) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<NumError>,
{
    run(f, inputs, step, true)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F, E>(f: F, x: &Tensor, step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, Var) -> std::result::Result<Var, E>,
    E: From<NumError>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), step)
}

fn run<F, E>(f: F, inputs: &[Tensor], step: f64, screen: bool) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<NumError>,
{
    if !(step > 0.0) {
        return Err(NumError::InvalidArgument(format!("finite-difference step {step}")).into());
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out)?;
        if !v.is_finite() {
            return Err(NumError::NonFinite { op: "grad_check" }.into());
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut central = |which: usize, idx: usize, h: f64| -> std::result::Result<f64, E> {
        let base = inputs[which].data()[idx];
        work[which] = perturbed(&inputs[which], idx, base + h)?;
        let plus = eval(&work)?;
        work[which] = perturbed(&inputs[which], idx, base - h)?;
        let minus = eval(&work)?;
        work[which] = inputs[which].clone();
        Ok((plus - minus) / (2.0 * h))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, nonsmooth: 0, smooth_max_rel_error: 0.0, coordinates: 0 };
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input is a trainable leaf");
        for idx in 0..inputs[which].numel() {
            let numeric = central(which, idx, step)?;
            let a = analytic.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.coordinates += 1;
            let kinked = screen && {
                let half = central(which, idx, step / 2.0)?;
                (numeric - half).abs() > 1e-5 * numeric.abs().max(1.0)
            };
            if kinked {
                report.nonsmooth += 1;
            } else {
                report.smooth_max_rel_error = report.smooth_max_rel_error.max(err);
            }
        }
    }
    Ok(report)
}

fn perturbed(t: &Tensor, idx: usize, value: f64) -> Result<Tensor> {
    let mut data = t.data().to_vec();
    data[idx] = value;
    Tensor::new(t.shape().to_vec(), data)
}
