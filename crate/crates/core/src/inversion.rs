//! Multi-step deterministic noising by DDIM inversion.
//!
//! The ladder starts at the clean sample (`s_0 = 0`), takes a first gap of
//! `residual` and then gaps of `delta_t` until it reaches the target. Each rung
//! moves the state along the DDIM ODE using the noise prediction evaluated at
//! the *source* rung.

use std::io::Write;

use serde::Serialize;

use crate::diffusion::{ddim_transfer, DiffusionSchedule, NoisyLatent};
use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, norm, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InversionPlan {
    pub target_t: usize,
    pub delta_t: usize,
    pub residual: usize,
    /// Rungs `s_1 < … < s_k = target_t`; `s_0 = 0` is implicit.
    pub ladder: Vec<usize>,
}

impl InversionPlan {
    pub fn k(&self) -> usize {
        self.ladder.len()
    }

    /// All rungs including the implicit clean rung `s_0 = 0`.
    pub fn rungs_with_origin(&self) -> impl DoubleEndedIterator<Item = usize> + '_ {
        std::iter::once(0).chain(self.ladder.iter().copied())
    }
}

pub fn plan_inversion(target_t: usize, delta_t: usize, horizon: usize) -> Result<InversionPlan> {
    if target_t < 1 || target_t > horizon {
        return Err(Error::TimestepOutOfRange {
            t: target_t,
            min: 1,
            max: horizon,
        });
    }
    if delta_t < 1 || delta_t > horizon {
        return Err(Error::InvalidArgument(format!(
            "delta_t = {delta_t} must lie in [1, {horizon}]"
        )));
    }
    let (k, residual) = match target_t % delta_t {
        0 => (target_t / delta_t, delta_t),
        r => (target_t / delta_t + 1, r),
    };
    let ladder = (0..k).map(|j| residual + j * delta_t).collect();
    Ok(InversionPlan {
        target_t,
        delta_t,
        residual,
        ladder,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    /// Index of the rung being left (0 = clean sample).
    pub rung: usize,
    pub t: usize,
    pub x_norm: f64,
    pub eps_norm: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Invert `x0` to `plan.target_t`. `predict(x, t)` returns the noise
/// prediction used at each source rung (the unconditional one, by default).
pub fn invert<F>(
    x0: &NoisyLatent,
    plan: &InversionPlan,
    predict: F,
    schedule: &DiffusionSchedule,
) -> Result<NoisyLatent>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    invert_inner(x0, plan, predict, schedule, None)
}

/// As [`invert`], also recording one [`TraceRow`] per rung.
pub fn invert_traced<F>(
    x0: &NoisyLatent,
    plan: &InversionPlan,
    predict: F,
    schedule: &DiffusionSchedule,
) -> Result<(NoisyLatent, Vec<TraceRow>)>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut rows = Vec::with_capacity(plan.k());
    let out = invert_inner(x0, plan, predict, schedule, Some(&mut rows))?;
    Ok((out, rows))
}

fn invert_inner<F>(
    x0: &NoisyLatent,
    plan: &InversionPlan,
    mut predict: F,
    schedule: &DiffusionSchedule,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<NoisyLatent>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if x0.t != 0 {
        return Err(Error::InvalidArgument(format!(
            "inversion starts from clean data, got t = {}",
            x0.t
        )));
    }
    schedule.check_t(plan.target_t, 1)?;
    let mut x = x0.data.clone();
    let mut source = 0;
    for (rung, target) in plan.ladder.iter().copied().enumerate() {
        let eps = predict(&x, source)?;
        ensure_same_shape("inversion noise prediction", &x, &eps)?;
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                rung,
                t: source,
                x_norm: norm(&x),
                eps_norm: norm(&eps),
            });
        }
        x = ddim_transfer(&x, &eps, source, target, schedule)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InversionDiverged {
                rung: rung + 1,
                t: target,
            });
        }
        source = target;
    }
    Ok(NoisyLatent {
        data: x,
        t: plan.target_t,
    })
}

/// Deterministic DDIM reverse from `plan.target_t` back down the same ladder to t = 0.
pub fn reverse_along<F>(
    xt: &NoisyLatent,
    plan: &InversionPlan,
    mut predict: F,
    schedule: &DiffusionSchedule,
) -> Result<NoisyLatent>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if xt.t != plan.target_t {
        return Err(Error::InvalidArgument(format!(
            "reverse expects t = {}, got t = {}",
            plan.target_t, xt.t
        )));
    }
    let rungs: Vec<usize> = plan.rungs_with_origin().collect();
    let mut x = xt.data.clone();
    for pair in rungs.windows(2).rev() {
        let (to, from) = (pair[0], pair[1]);
        let eps = predict(&x, from)?;
        ensure_same_shape("reverse noise prediction", &x, &eps)?;
        x = ddim_transfer(&x, &eps, from, to, schedule)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("reverse step {from} -> {to}")));
        }
    }
    Ok(NoisyLatent { data: x, t: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::mix_with_alpha_bar;
    use crate::tensor::{randn, rel_l2, zeros};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plan_exact_multiple() {
        let p = plan_inversion(500, 100, 1000).unwrap();
        assert_eq!(p.residual, 100);
        assert_eq!(p.k(), 5);
        assert_eq!(p.ladder, vec![100, 200, 300, 400, 500]);
    }

    #[test]
    fn plan_with_residual() {
        let p = plan_inversion(530, 100, 1000).unwrap();
        assert_eq!(p.residual, 30);
        assert_eq!(p.k(), 6);
        assert_eq!(p.ladder, vec![30, 130, 230, 330, 430, 530]);
    }

    #[test]
    fn plan_single_step() {
        let p = plan_inversion(50, 50, 1000).unwrap();
        assert_eq!((p.residual, p.k(), p.ladder.clone()), (50, 1, vec![50]));
    }

    #[test]
    fn plan_rejects_out_of_range() {
        assert!(plan_inversion(0, 10, 1000).is_err());
        assert!(plan_inversion(1001, 10, 1000).is_err());
        assert!(plan_inversion(100, 0, 1000).is_err());
        assert!(plan_inversion(100, 1001, 1000).is_err());
    }

    #[test]
    fn zero_predictor_decays_signal() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = NoisyLatent::clean(randn(&[4], &mut rng)).unwrap();
        for target in [50, 130, 530] {
            let plan = plan_inversion(target, 50, 1000).unwrap();
            let out = invert(&x0, &plan, |x, _| Ok(zeros(x.shape())), &s).unwrap();
            let expected = &x0.data * s.alpha_bar(target).unwrap().sqrt();
            assert!(rel_l2(&out.data, &expected) < 1e-12);
        }
    }

    #[test]
    fn single_rung_uses_clean_prediction() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = NoisyLatent::clean(randn(&[3], &mut rng)).unwrap();
        let fixed = randn(&[3], &mut rng);
        let plan = plan_inversion(70, 100, 1000).unwrap();
        let mut seen = Vec::new();
        let out = invert(
            &x0,
            &plan,
            |x, t| {
                seen.push(t);
                Ok(x * 0.5 + &fixed)
            },
            &s,
        )
        .unwrap();
        assert_eq!(seen, vec![0]);
        let eps0 = &x0.data * 0.5 + &fixed;
        let expected = mix_with_alpha_bar(&x0.data, &eps0, s.alpha_bar(70).unwrap());
        assert!(rel_l2(&out.data, &expected) < 1e-14);
    }

    #[test]
    fn ladder_prefixes_are_consistent() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = NoisyLatent::clean(randn(&[3], &mut rng)).unwrap();
        let pred = |x: &Tensor, t: usize| Ok(x.mapv(|v| (v * 0.3 + t as f64 * 1e-3).sin()));
        let full = plan_inversion(530, 100, 1000).unwrap();
        let (_, trace) = invert_traced(&x0, &full, pred, &s).unwrap();
        assert_eq!(trace.len(), 6);
        // Inverting to 330 with the same residual must match the first rungs of the 530 run.
        let short = plan_inversion(330, 100, 1000).unwrap();
        let (mid, short_trace) = invert_traced(&x0, &short, pred, &s).unwrap();
        assert_eq!(&trace[..4], &short_trace[..]);
        let cont = InversionPlan {
            target_t: 530,
            delta_t: 100,
            residual: 100,
            ladder: vec![430, 530],
        };
        let mut x = mid.data.clone();
        let mut src = 330;
        for tgt in cont.ladder.iter().copied() {
            let eps = pred(&x, src).unwrap();
            x = ddim_transfer(&x, &eps, src, tgt, &s).unwrap();
            src = tgt;
        }
        let direct = invert(&x0, &full, pred, &s).unwrap();
        assert_eq!(x, direct.data);
    }

    #[test]
    fn deterministic_bitwise() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = NoisyLatent::clean(randn(&[8], &mut rng)).unwrap();
        let plan = plan_inversion(777, 50, 1000).unwrap();
        let pred = |x: &Tensor, _t: usize| Ok(x.mapv(f64::tanh));
        let a = invert(&x0, &plan, pred, &s).unwrap();
        let b = invert(&x0, &plan, pred, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_noise_round_trip_is_exact() {
        // A prediction constant along the trajectory makes inversion exactly reversible.
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = NoisyLatent::clean(randn(&[5], &mut rng)).unwrap();
        let eps = randn(&[5], &mut rng);
        let plan = plan_inversion(480, 50, 1000).unwrap();
        let inv = invert(&x0, &plan, |_, _| Ok(eps.clone()), &s).unwrap();
        let back = reverse_along(&inv, &plan, |_, _| Ok(eps.clone()), &s).unwrap();
        assert!(rel_l2(&back.data, &x0.data) < 1e-10);
    }

    #[test]
    fn divergence_reports_rung() {
        let s = DiffusionSchedule::default();
        let x0 = NoisyLatent::clean(zeros(&[2])).unwrap();
        let plan = plan_inversion(300, 100, 1000).unwrap();
        let err = invert(
            &x0,
            &plan,
            |x, t| {
                if t >= 200 {
                    Ok(x.mapv(|_| f64::INFINITY))
                } else {
                    Ok(zeros(x.shape()))
                }
            },
            &s,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InversionDiverged { rung: 3, t: 300 }));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let s = DiffusionSchedule::default();
        let x0 = NoisyLatent::clean(zeros(&[2])).unwrap();
        let plan = plan_inversion(100, 50, 1000).unwrap();
        let err = invert(&x0, &plan, |_, _| Ok(zeros(&[3])), &s).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn trace_csv_has_header() {
        let rows = vec![TraceRow {
            rung: 0,
            t: 0,
            x_norm: 1.0,
            eps_norm: 2.0,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("rung,t,x_norm,eps_norm\n"));
    }
}
