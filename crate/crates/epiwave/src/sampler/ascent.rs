//! Fixed-rate gradient ascent in the unconstrained space, used to move the
//! chains' random prior draws toward the posterior bulk before adaptation.

use super::ghmc::{Target, TargetEval};
use super::SamplerError;

/// Result of a warm-start run.
#[derive(Debug, Clone)]
pub struct AscentResult {
    pub z: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
    /// Steps that improved the objective and were kept.
    pub kept_steps: usize,
    /// Rate halvings spent on invalid or worsening proposals.
    pub halvings: usize,
}

/// `steps` iterations of `z <- z + rate * grad log p(z)`.
///
/// Only improving steps are kept, so the returned point never scores below
/// the start. A proposal that fails to evaluate (invalid region, failed
/// integration) halves the rate and retries; thirty consecutive failures
/// abort with the offending vector. Worsening-but-valid proposals also halve
/// the rate, but merely until the rate underflows, at which point the
/// current point is returned.
pub fn gradient_ascent<T: Target + ?Sized>(
    target: &T,
    z0: &[f64],
    learning_rate: f64,
    steps: usize,
) -> Result<AscentResult, SamplerError> {
    let (logp0, grad0) = match target.eval(z0)? {
        TargetEval::Value { logp, grad } if logp.is_finite() => (logp, grad),
        _ => return Err(SamplerError::InitInvalid(format!("ascent start {z0:?}"))),
    };
    let mut current = AscentResult {
        z: z0.to_vec(),
        logp: logp0,
        grad: grad0,
        kept_steps: 0,
        halvings: 0,
    };
    if learning_rate == 0.0 || steps == 0 {
        return Ok(current);
    }

    let mut rate = learning_rate;
    let mut consecutive_failures = 0usize;
    for _ in 0..steps {
        let proposal: Vec<f64> = current
            .z
            .iter()
            .zip(&current.grad)
            .map(|(&zi, &gi)| zi + rate * gi)
            .collect();
        match target.eval(&proposal)? {
            TargetEval::Value { logp, grad }
                if logp.is_finite() && grad.iter().all(|g| g.is_finite()) =>
            {
                consecutive_failures = 0;
                if logp >= current.logp {
                    current.z = proposal;
                    current.logp = logp;
                    current.grad = grad;
                    current.kept_steps += 1;
                } else {
                    current.halvings += 1;
                    rate *= 0.5;
                    if rate < 1e-300 {
                        break;
                    }
                }
            }
            _ => {
                consecutive_failures += 1;
                current.halvings += 1;
                if consecutive_failures >= 30 {
                    return Err(SamplerError::AscentStuck { at: proposal });
                }
                rate *= 0.5;
            }
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::ghmc::DiagGaussian;
    use crate::sampler::SamplerError;

    /// Quadratic with a known maximizer, plus an optional forbidden zone.
    struct Quadratic {
        center: Vec<f64>,
        forbidden_above: f64,
    }

    impl Target for Quadratic {
        fn dim(&self) -> usize {
            self.center.len()
        }

        fn eval(&self, z: &[f64]) -> Result<TargetEval, SamplerError> {
            if z.iter().any(|v| *v > self.forbidden_above) {
                return Ok(TargetEval::Invalid);
            }
            let logp = -0.5
                * z.iter()
                    .zip(&self.center)
                    .map(|(zi, ci)| (zi - ci) * (zi - ci))
                    .sum::<f64>();
            let grad = z
                .iter()
                .zip(&self.center)
                .map(|(zi, ci)| ci - zi)
                .collect();
            Ok(TargetEval::Value { logp, grad })
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let target = DiagGaussian { sd: vec![1.0; 3] };
        let out = gradient_ascent(&target, &[0.4, -0.2, 0.9], 0.0, 100).unwrap();
        assert_eq!(out.z, vec![0.4, -0.2, 0.9]);
        assert_eq!(out.kept_steps, 0);
    }

    #[test]
    fn converges_to_a_quadratic_maximizer() {
        let target = Quadratic {
            center: vec![2.0, -1.0, 0.5],
            forbidden_above: f64::INFINITY,
        };
        let out = gradient_ascent(&target, &[0.0; 3], 0.2, 400).unwrap();
        for (zi, ci) in out.z.iter().zip(&target.center) {
            assert!(
                (zi - ci).abs() <= 1e-6,
                "component {zi} did not reach {ci}"
            );
        }
    }

    #[test]
    fn objective_never_decreases() {
        // Oversized rate: raw steps overshoot and worsen; only improving
        // moves may be kept.
        let target = Quadratic {
            center: vec![1.0, 1.0],
            forbidden_above: f64::INFINITY,
        };
        let start = [-3.0, 4.0];
        let (l0, _) = match target.eval(&start).unwrap() {
            TargetEval::Value { logp, grad } => (logp, grad),
            _ => unreachable!(),
        };
        let out = gradient_ascent(&target, &start, 3.0, 200).unwrap();
        assert!(out.logp >= l0);
        assert!(out.halvings > 0, "an overshooting rate must get halved");
    }

    #[test]
    fn invalid_proposals_halve_the_rate_instead_of_aborting() {
        // The maximizer sits outside the allowed region; big steps poke into
        // the forbidden zone and must be retried smaller, not error out.
        let target = Quadratic {
            center: vec![5.0],
            forbidden_above: 1.0,
        };
        let out = gradient_ascent(&target, &[0.0], 0.5, 200).unwrap();
        assert!(out.z[0] <= 1.0);
        assert!(out.halvings > 0);
        assert!(out.logp > -12.5); // improved from the start value
    }

    /// Valid only at one exact point, with a gradient that always points
    /// away from it: every proposal at any rate is invalid.
    struct NeedlePoint;

    impl Target for NeedlePoint {
        fn dim(&self) -> usize {
            1
        }

        fn eval(&self, z: &[f64]) -> Result<TargetEval, SamplerError> {
            if z[0] == -2.0 {
                Ok(TargetEval::Value {
                    logp: 0.0,
                    grad: vec![1.0],
                })
            } else {
                Ok(TargetEval::Invalid)
            }
        }
    }

    #[test]
    fn persistent_failure_reports_the_offending_vector() {
        match gradient_ascent(&NeedlePoint, &[-2.0], 0.5, 200) {
            Err(SamplerError::AscentStuck { at }) => {
                assert_eq!(at.len(), 1);
                assert!(at[0] != -2.0, "failing proposal {at:?} should have moved");
            }
            other => panic!("expected stuck ascent, got {other:?}"),
        }
    }
}
