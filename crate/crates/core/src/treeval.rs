//! Conditional expectations on the lattice and the chain law.
//!
//! On a finitely supported chain `E_i[φ(X_{i+1}) | X_i = x]` is the finite sum
//! `Σ_j p_j φ(child_j(x))`, so every expectation here is exact up to
//! floating-point rounding.

use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};
use crate::forward::{Lattice, Stencil};

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `Σ_j p_j vals[child_j]`.
pub fn cond_expect(vals: &[f64], stencil: &Stencil<'_>) -> Result<f64> {
    let mut terms = [0.0; 8];
    let mut buf = Vec::new();
    let n = stencil.len();
    let slot: &mut [f64] = if n <= terms.len() {
        &mut terms[..n]
    } else {
        buf.resize(n, 0.0);
        &mut buf
    };
    for (j, b) in stencil.iter().enumerate() {
        let v = vals.get(b.child).ok_or_else(|| {
            FbsdeError::Structure(format!(
                "child {} missing from a value vector of length {}",
                b.child,
                vals.len()
            ))
        })?;
        slot[j] = b.weight * v;
    }
    Ok(compensated_sum(slot.iter().copied()))
}

/// Marginal law of the lattice chain at each level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLaw {
    pub levels: Vec<Vec<f64>>,
}

impl ChainLaw {
    pub fn level(&self, i: usize) -> &[f64] {
        &self.levels[i]
    }
}

/// Pushes the root point mass forward through the stencils.
pub fn chain_law(lattice: &Lattice) -> ChainLaw {
    let mut levels = Vec::with_capacity(lattice.levels());
    levels.push(vec![1.0]);
    for i in 0..lattice.steps() {
        let mut next = vec![0.0; lattice.level_len(i + 1)];
        for (node, &mass) in levels[i].iter().enumerate() {
            for b in lattice.stencil(i, node).iter() {
                next[b.child] += mass * b.weight;
            }
        }
        levels.push(next);
    }
    ChainLaw { levels }
}

/// `sqrt(Σ_nodes law(node) vals(node)^2)` at `level`.
pub fn l2_norm(vals: &[f64], law: &ChainLaw, level: usize) -> Result<f64> {
    let probs = law
        .levels
        .get(level)
        .ok_or_else(|| FbsdeError::Domain(format!("level {level} out of range")))?;
    if probs.len() != vals.len() {
        return Err(FbsdeError::Structure(format!(
            "level {level} has {} nodes but {} values were given",
            probs.len(),
            vals.len()
        )));
    }
    Ok(compensated_sum(probs.iter().zip(vals).map(|(p, v)| p * v * v)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::build_lattice;
    use crate::grids::{trinomial, TimeGrid};
    use crate::model::{Coefficient, DriverSpec, ModelSpec, TerminalCondition};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn lattice(n: usize) -> Lattice {
        let spec = ModelSpec::new(
            1.0,
            0.0,
            Coefficient::Constant(0.0),
            Coefficient::Constant(1.5),
            TerminalCondition::Quadratic { scale: 1.0 },
            DriverSpec::polynomial(vec![0.0], 0.0).unwrap(),
        )
        .unwrap();
        let tg = TimeGrid::new(1.0, n).unwrap();
        let dist = trinomial(tg.h()).unwrap();
        build_lattice(&spec, &tg, &dist, None).unwrap()
    }

    #[test]
    fn finite_sum_examples() {
        let lat = lattice(1);
        let st = lat.stencil(0, 0);
        assert_relative_eq!(cond_expect(&[1.0, 2.0, 3.0], &st).unwrap(), 2.0, max_relative = 1e-15);
        assert_relative_eq!(cond_expect(&[4.5; 3], &st).unwrap(), 4.5, max_relative = 1e-15);
        assert_relative_eq!(cond_expect(&[1.0, 0.0, 0.0], &st).unwrap(), 1.0 / 6.0, max_relative = 1e-15);
        assert!(matches!(cond_expect(&[1.0, 2.0], &st), Err(FbsdeError::Structure(_))));
    }

    #[test]
    fn chain_law_levels() {
        let law = chain_law(&lattice(3));
        assert_eq!(law.level(0), &[1.0]);
        assert_relative_eq!(law.level(1)[0], 1.0 / 6.0, max_relative = 1e-15);
        assert_relative_eq!(law.level(1)[1], 2.0 / 3.0, max_relative = 1e-15);
        // convolution by hand: 2 (1/6)(1/6) + (2/3)^2
        assert_relative_eq!(law.level(2)[2], 0.5, max_relative = 1e-15);
        for lvl in &law.levels {
            assert!((lvl.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn norm_examples() {
        let law = ChainLaw {
            levels: vec![vec![0.25, 0.75]],
        };
        assert_eq!(l2_norm(&[-3.0, -3.0], &law, 0).unwrap(), 3.0);
        assert_eq!(l2_norm(&[0.0, 0.0], &law, 0).unwrap(), 0.0);
        assert_eq!(l2_norm(&[1.0, 0.0], &law, 0).unwrap(), 0.5);
        assert!(l2_norm(&[1.0], &law, 0).is_err());
        assert!(l2_norm(&[1.0, 1.0], &law, 1).is_err());
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let s = compensated_sum([1e16, 1.0, -1e16, 1.0]);
        assert_eq!(s, 2.0);
    }

    proptest! {
        #[test]
        fn tower_property_and_jensen(vals in prop::collection::vec(-100.0f64..100.0, 9)) {
            let lat = lattice(4);
            let law = chain_law(&lat);
            // level 3 -> 2 -> 1 against the two-step stencil
            let v3 = &vals[..7];
            let e2: Vec<f64> = (0..5).map(|k| cond_expect(v3, &lat.stencil(2, k)).unwrap()).collect();
            let e1: Vec<f64> = (0..3).map(|k| cond_expect(&e2, &lat.stencil(1, k)).unwrap()).collect();
            for k in 0..3 {
                let mut direct = 0.0;
                for a in lat.stencil(1, k).iter() {
                    for b in lat.stencil(2, a.child).iter() {
                        direct += a.weight * b.weight * v3[b.child];
                    }
                }
                prop_assert!((e1[k] - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
            }
            prop_assert!(l2_norm(&e2, &law, 2).unwrap() <= l2_norm(v3, &law, 3).unwrap() + 1e-12);
        }
    }
}
