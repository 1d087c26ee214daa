//! Forward chains and the recombining lattice.
//!
//! With constant `b`, `σ` and a lattice-type increment law, the Euler chain
//! recombines: level `i` of a trinomial lattice holds the `2i+1` states
//! `x0 + i b h + σ k sqrt(3h)`, `|k| <= i`, and no spatial projection is
//! needed. Otherwise every Euler step is projected on a [`SpatialGrid`] and
//! the level supports are the reachable grid points.

use std::io::Write;

use serde::Serialize;

use crate::error::{FbsdeError, Result};
use crate::grids::{IncrementDistribution, SpatialGrid, TimeGrid};
use crate::model::ModelSpec;

/// `x + b(t,x) h + σ(t,x) dw`.
pub fn euler_step(spec: &ModelSpec, t: f64, x: f64, dw: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(FbsdeError::Domain(format!("step size must be positive, got {h}")));
    }
    let next = x + spec.drift.eval(t, x) * h + spec.diffusion.eval(t, x) * dw;
    if !next.is_finite() {
        return Err(FbsdeError::NonFinite(format!("Euler step from x={x} at t={t}")));
    }
    Ok(next)
}

/// `Π(x + b(t,x) h + σ(t,x) dw)`; the flag reports clamping at the hull.
pub fn quantized_forward_step(
    spec: &ModelSpec,
    grid: &SpatialGrid,
    t: f64,
    x: f64,
    dw: f64,
    h: f64,
) -> Result<(f64, bool)> {
    let p = grid.project(euler_step(spec, t, x, dw, h)?);
    Ok((p.value, p.saturated))
}

/// One branch of a node's transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Branch {
    pub child: usize,
    pub weight: f64,
    pub increment: f64,
    /// Index into the increment law.
    pub j: usize,
}

/// Transition of one node: children at the next level with the law's weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil<'a> {
    children: &'a [usize],
    weights: &'a [f64],
    increments: &'a [f64],
}

impl<'a> Stencil<'a> {
    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn children(&self) -> &'a [usize] {
        self.children
    }

    pub fn weights(&self) -> &'a [f64] {
        self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = Branch> + 'a {
        let (c, w, g) = (self.children, self.weights, self.increments);
        (0..c.len()).map(move |j| Branch {
            child: c[j],
            weight: w[j],
            increment: g[j],
            j,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    states: Vec<f64>,
    /// Row-major `node * branches + j`; empty at the last level.
    children: Vec<usize>,
}

/// Supports `Γ_i` and transition stencils for `i = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    time_grid: TimeGrid,
    dist: IncrementDistribution,
    weights: Vec<f64>,
    levels: Vec<Level>,
    grid: Option<SpatialGrid>,
    saturation_count: usize,
}

impl Lattice {
    pub fn time_grid(&self) -> &TimeGrid {
        &self.time_grid
    }

    pub fn distribution(&self) -> &IncrementDistribution {
        &self.dist
    }

    pub fn grid(&self) -> Option<&SpatialGrid> {
        self.grid.as_ref()
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    /// Number of levels `N + 1`.
    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_len(&self, i: usize) -> usize {
        self.levels[i].states.len()
    }

    pub fn states(&self, i: usize) -> &[f64] {
        &self.levels[i].states
    }

    pub fn branches(&self) -> usize {
        self.dist.len()
    }

    /// Branches clamped at the grid hull during construction.
    pub fn saturation_count(&self) -> usize {
        self.saturation_count
    }

    pub fn total_nodes(&self) -> usize {
        self.levels.iter().map(|l| l.states.len()).sum()
    }

    /// Stencil of `node` at level `i < N`.
    pub fn stencil(&self, i: usize, node: usize) -> Stencil<'_> {
        let b = self.branches();
        Stencil {
            children: &self.levels[i].children[node * b..(node + 1) * b],
            weights: &self.weights,
            increments: &self.dist.points,
        }
    }

    /// Writes `{level, node, state, stencil}` records as JSON.
    pub fn dump_json<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Node {
            level: usize,
            node: usize,
            state: f64,
            stencil: Vec<Branch>,
        }
        #[derive(Serialize)]
        struct Dump {
            steps: usize,
            h: f64,
            saturation_count: usize,
            nodes: Vec<Node>,
        }
        let mut nodes = Vec::with_capacity(self.total_nodes());
        for (i, level) in self.levels.iter().enumerate() {
            for (k, &state) in level.states.iter().enumerate() {
                let stencil = if i < self.steps() {
                    self.stencil(i, k).iter().collect()
                } else {
                    Vec::new()
                };
                nodes.push(Node {
                    level: i,
                    node: k,
                    state,
                    stencil,
                });
            }
        }
        serde_json::to_writer_pretty(
            &mut out,
            &Dump {
                steps: self.steps(),
                h: self.time_grid.h(),
                saturation_count: self.saturation_count,
                nodes,
            },
        )?;
        writeln!(out)?;
        Ok(())
    }
}

/// Integer steps `s_j` with `g_j = s_j u`, when the law lives on a lattice.
fn lattice_steps(dist: &IncrementDistribution) -> Option<(f64, Vec<i64>)> {
    let exact = dist.exact.as_ref()?;
    let base = exact
        .iter()
        .filter(|p| p.sign != 0)
        .map(|p| p.sq)
        .min()?;
    let mut steps = Vec::with_capacity(exact.len());
    for p in exact {
        if p.sign == 0 {
            steps.push(0);
            continue;
        }
        let ratio = p.sq / base;
        if !ratio.is_integer() {
            return None;
        }
        let n = *ratio.numer();
        let s = (n as f64).sqrt().round() as i64;
        if s * s != n {
            return None;
        }
        steps.push(p.sign as i64 * s);
    }
    let unit = (crate::grids::ratio_f64(base) * dist.h).sqrt();
    Some((unit, steps))
}

/// Builds `Γ_0..Γ_N` and the stencils.
///
/// Without a grid the coefficients must be constant and the law must live
/// on a lattice, otherwise the tree would not recombine.
pub fn build_lattice(
    spec: &ModelSpec,
    tg: &TimeGrid,
    dist: &IncrementDistribution,
    grid: Option<&SpatialGrid>,
) -> Result<Lattice> {
    if (dist.h - tg.h()).abs() > 1e-12 * tg.h() {
        return Err(FbsdeError::Config(format!(
            "increment law built for h = {} but the time grid has h = {}",
            dist.h,
            tg.h()
        )));
    }
    let weights = dist.weights_f64();
    match grid {
        None => build_recombining(spec, tg, dist, weights),
        Some(g) => build_projected(spec, tg, dist, weights, g),
    }
}

fn build_recombining(
    spec: &ModelSpec,
    tg: &TimeGrid,
    dist: &IncrementDistribution,
    weights: Vec<f64>,
) -> Result<Lattice> {
    let (b, sigma) = spec.constant_coefficients().ok_or_else(|| {
        FbsdeError::Config(
            "non-constant coefficients need a spatial grid (the tree would not recombine)".into(),
        )
    })?;
    let (unit, steps) = lattice_steps(dist).ok_or_else(|| {
        FbsdeError::Config("increment law is not lattice-valued; supply a spatial grid".into())
    })?;
    let reach = steps.iter().map(|s| s.abs()).max().unwrap_or(0);
    let h = tg.h();
    let n = tg.steps();
    let mut levels = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let half = i as i64 * reach;
        let shift = spec.x0 + i as f64 * b * h;
        let states: Vec<f64> = (-half..=half)
            .map(|k| shift + sigma * (k as f64 * unit))
            .collect();
        let children = if i < n {
            let mut c = Vec::with_capacity(states.len() * steps.len());
            for node in 0..states.len() as i64 {
                for s in &steps {
                    // child index in level i+1, offset by one extra reach
                    c.push((node + reach + s) as usize);
                }
            }
            c
        } else {
            Vec::new()
        };
        levels.push(Level { states, children });
    }
    Ok(Lattice {
        time_grid: tg.clone(),
        dist: dist.clone(),
        weights,
        levels,
        grid: None,
        saturation_count: 0,
    })
}

fn build_projected(
    spec: &ModelSpec,
    tg: &TimeGrid,
    dist: &IncrementDistribution,
    weights: Vec<f64>,
    grid: &SpatialGrid,
) -> Result<Lattice> {
    let h = tg.h();
    let n = tg.steps();
    let root = grid.project(spec.x0);
    let mut saturation_count = usize::from(root.saturated);
    let mut indices: Vec<i64> = vec![root.index];
    let mut levels = Vec::with_capacity(n + 1);
    for i in 0..n {
        let t = tg.t(i);
        let mut targets = Vec::with_capacity(indices.len() * dist.len());
        for &k in &indices {
            let x = grid.point(k);
            for &g in &dist.points {
                let p = grid.project(euler_step(spec, t, x, g, h)?);
                saturation_count += usize::from(p.saturated);
                targets.push(p.index);
            }
        }
        let mut next = targets.clone();
        next.sort_unstable();
        next.dedup();
        let children = targets
            .iter()
            .map(|k| next.binary_search(k).expect("target is in the next support"))
            .collect();
        levels.push(Level {
            states: indices.iter().map(|&k| grid.point(k)).collect(),
            children,
        });
        indices = next;
    }
    levels.push(Level {
        states: indices.iter().map(|&k| grid.point(k)).collect(),
        children: Vec::new(),
    });
    Ok(Lattice {
        time_grid: tg.clone(),
        dist: dist.clone(),
        weights,
        levels,
        grid: Some(*grid),
        saturation_count,
    })
}
