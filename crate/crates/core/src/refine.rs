//! Mutation and local refinement for circle packings.
//!
//! `simulated_mutate` perturbs a packing with one randomly chosen operator and
//! then refines it in three phases:
//!
//! 1. penalty relaxation: Adam steps on `-sum(r) + mu * penalty` with a rising
//!    `mu`, moving centers and radii jointly;
//! 2. projection: clamp into the square and shrink overlapping pairs, which
//!    makes the packing exactly feasible;
//! 3. polish: coordinate ascent where each circle's center moves (compass
//!    search) to the spot that admits the largest radius given its neighbors,
//!    repeated until a sweep gains less than `FIXED_POINT_TOL`.
//!
//! Phase 3 only ever grows radii from a feasible state, so the output is valid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::packing::{Circle, CirclePacking};
use crate::par;

pub const FIXED_POINT_TOL: f64 = 1e-9;
pub const MAX_POLISH_SWEEPS: u32 = 120;

const RELAX_STEPS: usize = 500;
const CENTER_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationOp {
    Jitter,
    Reseed,
    Shrink,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mutation {
    pub packing: CirclePacking,
    pub op: MutationOp,
    /// Polish sweeps until the fixed point (drives synthetic token usage).
    pub iterations: u32,
}

/// One mutation plus refinement. Deterministic in `(packing, seed)`.
pub fn simulated_mutate(packing: &CirclePacking, seed: u64) -> CirclePacking {
    mutate(packing, seed).packing
}

pub fn mutate(packing: &CirclePacking, seed: u64) -> Mutation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut circles = packing.circles.clone();
    let op = match rng.random_range(0..3) {
        0 => MutationOp::Jitter,
        1 => MutationOp::Reseed,
        _ => MutationOp::Shrink,
    };
    if !circles.is_empty() {
        match op {
            MutationOp::Jitter => {
                let sigma = [0.005, 0.02, 0.08][rng.random_range(0..3)];
                let noise = Normal::new(0.0, sigma).expect("finite sigma");
                for c in &mut circles {
                    c.x += noise.sample(&mut rng);
                    c.y += noise.sample(&mut rng);
                }
            }
            MutationOp::Reseed => {
                let i = rng.random_range(0..circles.len());
                circles[i] = Circle::new(rng.random(), rng.random(), 0.01);
            }
            MutationOp::Shrink => {
                let f = rng.random_range(0.5..0.95);
                for c in &mut circles {
                    c.r *= f;
                }
            }
        }
    }
    let (circles, iterations) = refine(circles);
    Mutation {
        packing: CirclePacking::new(circles),
        op,
        iterations,
    }
}

/// Best of `seeds.len()` independent mutations of `packing`; ties keep the
/// earliest seed. Returns the winner and the iterations spent on all attempts.
pub fn best_of(packing: &CirclePacking, seeds: &[u64]) -> (Mutation, u32) {
    let results = par::map(seeds, |&s| mutate(packing, s));
    pick_best(results)
}

/// Sequential twin of [`best_of`].
pub fn best_of_seq(packing: &CirclePacking, seeds: &[u64]) -> (Mutation, u32) {
    pick_best(seeds.iter().map(|&s| mutate(packing, s)).collect())
}

fn pick_best(results: Vec<Mutation>) -> (Mutation, u32) {
    let total: u32 = results.iter().map(|m| m.iterations).sum();
    let best = results
        .into_iter()
        .reduce(|a, b| {
            if b.packing.sum_of_radii() > a.packing.sum_of_radii() {
                b
            } else {
                a
            }
        })
        .expect("at least one seed");
    (best, total)
}

/// Runs relaxation, projection and polish. Returns the refined circles and
/// the number of polish sweeps.
pub fn refine(mut circles: Vec<Circle>) -> (Vec<Circle>, u32) {
    if circles.is_empty() {
        return (circles, 0);
    }
    sanitize(&mut circles);
    relax(&mut circles);
    project(&mut circles);
    let sweeps = polish(&mut circles);
    (circles, sweeps)
}

fn sanitize(circles: &mut [Circle]) {
    for (i, c) in circles.iter_mut().enumerate() {
        if !c.x.is_finite() || !c.y.is_finite() {
            // Spread degenerate centers along the diagonal.
            let t = (i as f64 + 0.5) / 1024.0;
            c.x = t;
            c.y = 1.0 - t;
        }
        c.x = c.x.clamp(CENTER_MARGIN, 1.0 - CENTER_MARGIN);
        c.y = c.y.clamp(CENTER_MARGIN, 1.0 - CENTER_MARGIN);
        if !c.r.is_finite() || c.r < 0.0 {
            c.r = 0.0;
        }
    }
}

fn relax(circles: &mut [Circle]) {
    let n = circles.len();
    let dim = 3 * n;
    let mut m = vec![0.0f64; dim];
    let mut v = vec![0.0f64; dim];
    let mut grad = vec![0.0f64; dim];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-12);
    for t in 0..RELAX_STEPS {
        let frac = t as f64 / RELAX_STEPS as f64;
        let mu = 10.0 * 1e4f64.powf(frac);
        let lr = 4e-3 * (1.0 - 0.9 * frac);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (i, c) in circles.iter().enumerate() {
            grad[3 * i + 2] -= 1.0;
            for (excess, dpos, axis) in [
                (c.r - c.x, -1.0, 0),
                (c.r + c.x - 1.0, 1.0, 0),
                (c.r - c.y, -1.0, 1),
                (c.r + c.y - 1.0, 1.0, 1),
            ] {
                if excess > 0.0 {
                    grad[3 * i + 2] += 2.0 * mu * excess;
                    grad[3 * i + axis] += 2.0 * mu * excess * dpos;
                }
            }
            if c.r < 0.0 {
                grad[3 * i + 2] += 2.0 * mu * c.r;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (circles[i], circles[j]);
                let dx = a.x - b.x;
                let dy = a.y - b.y;
                let d = (dx * dx + dy * dy).sqrt().max(1e-12);
                let overlap = a.r + b.r - d;
                if overlap > 0.0 {
                    let g = 2.0 * mu * overlap;
                    grad[3 * i + 2] += g;
                    grad[3 * j + 2] += g;
                    grad[3 * i] -= g * dx / d;
                    grad[3 * i + 1] -= g * dy / d;
                    grad[3 * j] += g * dx / d;
                    grad[3 * j + 1] += g * dy / d;
                }
            }
        }
        let bc1 = 1.0 - b1.powi(t as i32 + 1);
        let bc2 = 1.0 - b2.powi(t as i32 + 1);
        for (k, g) in grad.iter().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let step = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            let c = &mut circles[k / 3];
            match k % 3 {
                0 => c.x = (c.x - step).clamp(CENTER_MARGIN, 1.0 - CENTER_MARGIN),
                1 => c.y = (c.y - step).clamp(CENTER_MARGIN, 1.0 - CENTER_MARGIN),
                _ => c.r = (c.r - step).max(0.0),
            }
        }
    }
}

/// Makes the packing feasible: radii are capped by wall clearance, then each
/// overlapping pair is shrunk proportionally. Later shrinks only reduce radii,
/// so pairs fixed earlier stay fixed.
fn project(circles: &mut [Circle]) {
    for c in circles.iter_mut() {
        c.r = c.r.max(0.0).min(c.wall_clearance());
    }
    let n = circles.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = circles[i].center_distance(&circles[j]);
            let sum = circles[i].r + circles[j].r;
            if sum > d {
                let f = if sum > 0.0 { d / sum } else { 0.0 };
                circles[i].r *= f;
                circles[j].r *= f;
            }
        }
    }
}

/// Largest radius circle `i` could take if centered at `(x, y)`.
fn clearance(circles: &[Circle], i: usize, x: f64, y: f64) -> f64 {
    let probe = Circle::new(x, y, 0.0);
    let mut best = probe.wall_clearance();
    for (j, other) in circles.iter().enumerate() {
        if j != i {
            best = best.min(probe.center_distance(other) - other.r);
        }
    }
    best
}

const DIRECTIONS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
];

fn polish(circles: &mut [Circle]) -> u32 {
    let n = circles.len();
    let mut sweeps = 0;
    while sweeps < MAX_POLISH_SWEEPS {
        sweeps += 1;
        let mut gain = 0.0;
        for i in 0..n {
            let (mut x, mut y) = (circles[i].x, circles[i].y);
            let mut best = clearance(circles, i, x, y);
            let mut step = 0.05;
            while step > 1e-11 {
                let mut moved = false;
                for (dx, dy) in DIRECTIONS {
                    let (nx, ny) = (x + dx * step, y + dy * step);
                    if !(0.0..=1.0).contains(&nx) || !(0.0..=1.0).contains(&ny) {
                        continue;
                    }
                    let f = clearance(circles, i, nx, ny);
                    if f > best {
                        best = f;
                        x = nx;
                        y = ny;
                        moved = true;
                        break;
                    }
                }
                if !moved {
                    step *= 0.5;
                }
            }
            if best > circles[i].r {
                gain += best - circles[i].r;
                circles[i] = Circle::new(x, y, best);
            }
        }
        if gain < FIXED_POINT_TOL {
            break;
        }
    }
    relocate_empty(circles);
    sweeps
}

/// A circle squeezed to zero radius moves to the grid point with the most
/// free space.
fn relocate_empty(circles: &mut [Circle]) {
    const GRID: usize = 64;
    for i in 0..circles.len() {
        if circles[i].r > 0.0 {
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0.5, 0.5);
        for gx in 0..GRID {
            for gy in 0..GRID {
                let x = (gx as f64 + 0.5) / GRID as f64;
                let y = (gy as f64 + 0.5) / GRID as f64;
                let f = clearance(circles, i, x, y);
                if f > best.0 {
                    best = (f, x, y);
                }
            }
        }
        circles[i] = Circle::new(best.1, best.2, best.0.max(0.0));
    }
}
