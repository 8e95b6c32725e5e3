use super::{DiffError, Tape, Tensor, Var};

/// Smallest denominator used when turning an absolute gradient error into a
/// relative one, so coordinates with vanishing gradient are judged on an
/// absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, coordinate)` with the largest error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// finite differences with step `h`.
///
/// Values passed through [`Tape::stop_gradient`] are held at their
/// unperturbed values in the finite-difference passes, so both sides
/// differentiate the same function.
///
/// `coords` restricts the check to `(input, flat index)` pairs; `None` checks
/// every coordinate of every input. The relative error of one coordinate is
/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn gradcheck<E, F>(
    inputs: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    h: f64,
    f: F,
) -> Result<GradCheck, E>
where
    E: From<DiffError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    tape.record_detached();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();
    let detached = tape.take_detached();

    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        tape.replay_detached(detached.clone());
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
                .collect();
            &all
        }
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for &(k, i) in coords {
        let x0 = work[k].data()[i];
        work[k].data_mut()[i] = x0 + h;
        let up = eval(&work)?;
        work[k].data_mut()[i] = x0 - h;
        let down = eval(&work)?;
        work[k].data_mut()[i] = x0;

        let numeric = (up - down) / (2.0 * h);
        let a = analytic[k].data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if !(err <= report.max_rel_err) {
            report.max_rel_err = err;
            report.worst = (k, i);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let r = gradcheck::<DiffError, _>(&[x], None, 1e-5, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn detached_branch_held_fixed() {
        // x·sg(x): the surrogate derivative is sg(x), not 2x
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = gradcheck::<DiffError, _>(&[x], None, 1e-5, |t, v| {
            let c = t.stop_gradient(v[0]);
            let p = t.mul(v[0], c)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // detaching one factor outside the check's knowledge breaks agreement
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = gradcheck::<DiffError, _>(&[x], None, 1e-5, |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            let p = t.mul(v[0], c)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_err > 0.4);
    }
}
