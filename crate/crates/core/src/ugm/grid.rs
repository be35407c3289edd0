//! MAP inference on the 4-connected grid: iterated conditional modes and
//! α-expansion moves solved by min-cut.

use ndarray::Array2;

use super::maxflow::FlowGraph;
use super::{total_energy, EnergyModel, Structure};
use crate::datacube::LabelMap;
use crate::error::{Error, Result};

fn neighbors(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (r > 0).then(|| (r - 1, c));
    let down = (r + 1 < h).then(|| (r + 1, c));
    let left = (c > 0).then(|| (r, c - 1));
    let right = (c + 1 < w).then(|| (r, c + 1));
    [up, down, left, right].into_iter().flatten()
}

/// Raster-order coordinate descent; a pixel only moves to a strictly better label.
pub fn icm(model: &EnergyModel, init: &LabelMap, max_sweeps: usize) -> Result<LabelMap> {
    model.require(Structure::Grid4)?;
    model.check_labeling(init)?;
    let energies = model.unary.energies();
    let (h, w, nc) = energies.dim();
    let wgt = model.pairwise.grid_weight();
    let mut labels = init.labels().clone();
    let mut cost = vec![0.0; nc];
    for _ in 0..max_sweeps {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                for (k, v) in cost.iter_mut().enumerate() {
                    *v = energies[[r, c, k]];
                }
                for (nr, ncol) in neighbors(r, c, h, w) {
                    let yj = labels[[nr, ncol]] as usize - 1;
                    for (k, v) in cost.iter_mut().enumerate() {
                        if k != yj {
                            *v += wgt;
                        }
                    }
                }
                let cur = labels[[r, c]] as usize - 1;
                let mut best = cur;
                for k in 0..nc {
                    if cost[k] < cost[best] {
                        best = k;
                    }
                }
                if best != cur {
                    labels[[r, c]] = best as u16 + 1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    LabelMap::new(labels, nc)
}

/// Best labeling reachable from `labels` in one α-expansion move.
fn expansion_move(model: &EnergyModel, labels: &Array2<u16>, alpha: u16) -> Result<Array2<u16>> {
    let energies = model.unary.energies();
    let (h, w, _) = energies.dim();
    let wgt = model.pairwise.grid_weight();
    let idx = |r: usize, c: usize| r * w + c;
    let a = alpha as usize - 1;
    let mut g = FlowGraph::new(h * w);
    // Source side keeps the current label (x = 0), sink side switches to α (x = 1).
    let mut linear = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = idx(r, c);
            let cur = labels[[r, c]] as usize - 1;
            linear[i] += energies[[r, c, a]] - energies[[r, c, cur]];
        }
    }
    let potts = |p: u16, q: u16| if p == q { 0.0 } else { wgt };
    for r in 0..h {
        for c in 0..w {
            for (nr, nc) in [(r, c + 1), (r + 1, c)] {
                if nr >= h || nc >= w {
                    continue;
                }
                let (yi, yj) = (labels[[r, c]], labels[[nr, nc]]);
                let e00 = potts(yi, yj);
                let e01 = potts(yi, alpha);
                let e10 = potts(alpha, yj);
                let e11 = 0.0;
                let coupling = e01 + e10 - e00 - e11;
                if coupling < -1e-12 * (1.0 + wgt) {
                    return Err(Error::Internal(format!(
                        "non-submodular expansion term at ({r}, {c}): {coupling}"
                    )));
                }
                // E = e00 + (e10 − e00)·x_i + (e11 − e10)·x_j + coupling·(1 − x_i)·x_j
                let (i, j) = (idx(r, c), idx(nr, nc));
                linear[i] += e10 - e00;
                linear[j] += e11 - e10;
                g.add_edge(i, j, coupling.max(0.0), 0.0);
            }
        }
    }
    for (i, &l) in linear.iter().enumerate() {
        if l > 0.0 {
            g.add_tweights(i, l, 0.0);
        } else {
            g.add_tweights(i, 0.0, -l);
        }
    }
    g.maxflow();
    let mut out = labels.clone();
    for r in 0..h {
        for c in 0..w {
            if !g.in_source_set(idx(r, c)) {
                out[[r, c]] = alpha;
            }
        }
    }
    Ok(out)
}

/// Cycles α-expansion moves over all labels until a full cycle brings no
/// improvement or `max_cycles` is reached.
///
/// With two classes a single expansion from the all-class-1 labeling is an
/// exact binary min-cut, so that case returns the global optimum.
pub fn alpha_expansion(model: &EnergyModel, init: &LabelMap, max_cycles: usize) -> Result<LabelMap> {
    alpha_expansion_traced(model, init, max_cycles).map(|(l, _)| l)
}

/// As [`alpha_expansion`], also returning the energy after each accepted move
/// (the first entry is the initial energy).
pub fn alpha_expansion_traced(
    model: &EnergyModel,
    init: &LabelMap,
    max_cycles: usize,
) -> Result<(LabelMap, Vec<f64>)> {
    model.require(Structure::Grid4)?;
    model.check_labeling(init)?;
    let nc = model.unary.num_classes();
    let energy = |l: &Array2<u16>| total_energy(&LabelMap::new(l.clone(), nc)?, model);
    let mut labels = init.labels().clone();
    let mut current = energy(&labels)?;
    let mut trace = vec![current];

    if nc == 2 {
        let ones = Array2::from_elem(labels.dim(), 1u16);
        let cut = expansion_move(model, &ones, 2)?;
        let e = energy(&cut)?;
        if e < current {
            labels = cut;
            trace.push(e);
        }
        return Ok((LabelMap::new(labels, nc)?, trace));
    }

    for _ in 0..max_cycles {
        let mut improved = false;
        for alpha in 1..=nc as u16 {
            let proposal = expansion_move(model, &labels, alpha)?;
            let e = energy(&proposal)?;
            if e < current - 1e-12 * current.abs().max(1.0) {
                labels = proposal;
                current = e;
                trace.push(e);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Ok((LabelMap::new(labels, nc)?, trace))
}
