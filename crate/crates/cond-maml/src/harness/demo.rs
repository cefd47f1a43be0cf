//! Gradient descent on rotated 2-D quadratic bowls, exported as plot-ready
//! rows.
//!
//! For each requested condition number the demo runs plain gradient descent
//! from the fixed unit start and emits one row per iterate: the two
//! coordinates, the loss, and the distance to the optimum at the origin.
//! Well-conditioned bowls contract geometrically; ill-conditioned ones stall
//! along the shallow eigendirection, which is the whole point of the
//! picture.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tasks::quadratic_problem;

/// One iterate of one bowl's descent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemoPoint {
    pub kappa: f64,
    pub step: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub loss: f64,
    /// Euclidean distance to the optimum (the origin).
    pub distance: f64,
}

/// Runs the descent for every condition number in `kappas` and returns
/// `steps + 1` rows per bowl (the start counts as step 0).
pub fn demo_quadratic(kappas: &[f64], lr: f64, steps: usize) -> Result<Vec<DemoPoint>> {
    if kappas.is_empty() {
        return Err(Error::InvalidArgument(
            "demo: need at least one condition number".to_string(),
        ));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "demo: need at least one step".to_string(),
        ));
    }
    let mut rows = Vec::with_capacity(kappas.len() * (steps + 1));
    for &kappa in kappas {
        let problem = quadratic_problem(kappa)?;
        let trajectory = problem.gd_trajectory(lr, steps)?;
        for (step, theta) in trajectory.iter().enumerate() {
            let (t1, t2) = (theta.data()[0], theta.data()[1]);
            rows.push(DemoPoint {
                kappa,
                step,
                theta1: t1,
                theta2: t2,
                loss: problem.loss_value(theta),
                distance: (t1 * t1 + t2 * t2).sqrt(),
            });
        }
    }
    Ok(rows)
}

/// Writes the rows as CSV. Pure function of its input: no timestamps, fully
/// reproducible.
pub fn write_demo_csv<W: Write>(mut w: W, rows: &[DemoPoint]) -> Result<()> {
    writeln!(w, "kappa,step,theta1,theta2,loss,distance")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.kappa, r.step, r.theta1, r.theta2, r.loss, r.distance
        )?;
    }
    Ok(())
}
