//! Trees of tiles, the size and density maps, and the greedy decompositions.
//!
//! Tile collections are slices of [`Tile`]; trees and decompositions refer to
//! tiles by index into the slice they were built from.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::tiling::{Plate, Tile, TriadicCube, TriadicGrid};

/// Largest tile count handled by the exact size enumerator.
pub const EXACT_SIZE_LIMIT: usize = 64;

/// Per-tile coefficients `F_M[f](t)` and `A_{σ,τ,M}[g](t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub f: Vec<f64>,
    pub a: Vec<f64>,
    /// Decay order behind `f`.
    pub m_f: u32,
    /// Decay order behind `a`.
    pub m_a: u32,
    pub canonical_packet: bool,
}

impl CoefficientTable {
    pub fn new(f: Vec<f64>, a: Vec<f64>, m_f: u32, m_a: u32) -> Result<Self> {
        check_dim(f.len(), a.len())?;
        if let Some(i) = f.iter().chain(&a).position(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::NonFinite(format!("coefficient {i} is negative or non-finite")));
        }
        Ok(CoefficientTable { f, a, m_f, m_a, canonical_packet: false })
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    Lacunary,
    Overlapping,
    Mixed,
}

/// Top `(ξ_T, R_T)` of a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Top {
    pub xi: Vec<f64>,
    pub plate: Plate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub indices: Vec<usize>,
    pub top: Top,
    pub kind: TreeKind,
}

impl Tree {
    /// Validates the tree axioms against `tiles` and classifies the tree.
    pub fn new(tiles: &[Tile], mut indices: Vec<usize>, top: Top) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        let mut lac = 0;
        for &i in &indices {
            let t = tiles.get(i).ok_or_else(|| Error::InvalidArgument(format!("tile index {i}")))?;
            if !t.q().contains_point(&top.xi) {
                return Err(Error::Precondition(format!("ξ_T is not in Q_t for tile {i}")));
            }
            if t.scl() > top.plate.scl() * (1.0 + 1e-12) || !t.plate().intersects(&top.plate) {
                return Err(Error::Precondition(format!("tile {i} is not under R_T")));
            }
            if !t.center_cube().contains_point(&top.xi) {
                lac += 1;
            }
        }
        let kind = if lac == indices.len() {
            TreeKind::Lacunary
        } else if lac == 0 {
            TreeKind::Overlapping
        } else {
            TreeKind::Mixed
        };
        Ok(Tree { indices, top, kind })
    }

    /// The largest lacunary tree with the given top: every tile with
    /// `ξ_T ∈ Q_t ∖ Q_t°`, `scl(R_t) ≤ scl(R_T)` and `R_t ∩ R_T ≠ ∅`.
    pub fn lacunary_at(tiles: &[Tile], top: Top) -> Result<Self> {
        let indices = (0..tiles.len())
            .filter(|&i| {
                let t = &tiles[i];
                t.q().contains_point(&top.xi)
                    && !t.center_cube().contains_point(&top.xi)
                    && t.scl() <= top.plate.scl() * (1.0 + 1e-12)
                    && t.plate().intersects(&top.plate)
            })
            .collect();
        Tree::new(tiles, indices, top)
    }

    /// `|R_T|`.
    pub fn measure(&self) -> f64 {
        self.top.plate.measure()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `t ≤ t′`: `Q_{t′} ⊆ Q_t` and `R_t ∩ R_{t′} ≠ ∅`.
pub fn leq(t: &Tile, u: &Tile) -> bool {
    t.q().contains(u.q()) && t.plate().intersects(u.plate())
}

/// Ternary digits `a_j` and their value `Σ a_j 3^{−j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub digits: Vec<u8>,
    pub value: f64,
    /// Whether `ξ` was moved off a triadic coordinate first.
    pub perturbed: bool,
}

impl Signature {
    /// Order by digits; equal to the order of values when digits differ.
    pub fn cmp_digits(&self, other: &Signature) -> Ordering {
        self.digits.cmp(&other.digits)
    }
}

/// `sig(ξ)`: `a_j = 0` iff `ξ` lies in the κ-center of its generation-`(−j)` cube.
pub fn signature(xi: &[f64], grid: &Arc<TriadicGrid>, kappa: u32, depth: u32) -> Result<Signature> {
    check_dim(grid.d(), xi.len())?;
    let mut x = xi.to_vec();
    let mut perturbed = false;
    let fine = 3f64.powi(kappa as i32);
    'check: for j in 1..=depth as i64 {
        let q = grid.cube_containing(&x, -j)?;
        for t in q.local(&x) {
            let u = t * fine;
            if (u - u.round()).abs() < 1e-9 {
                perturbed = true;
                break 'check;
            }
        }
    }
    if perturbed {
        let h = 3f64.powi(-(depth as i32) - 3);
        x.iter_mut().for_each(|c| *c += h);
    }
    let lo = (1.0 - 1.0 / fine) / 2.0;
    let hi = (1.0 + 1.0 / fine) / 2.0;
    let mut digits = Vec::with_capacity(depth as usize);
    let mut value = 0.0;
    let mut w = 1.0;
    for j in 1..=depth as i64 {
        let q = grid.cube_containing(&x, -j)?;
        let centered = q.local(&x).iter().all(|t| *t >= lo && *t < hi);
        let a = u8::from(!centered);
        w /= 3.0;
        value += a as f64 * w;
        digits.push(a);
    }
    Ok(Signature { digits, value, perturbed })
}

fn common_grid(tiles: &[Tile], subset: &[usize]) -> Result<Option<Arc<TriadicGrid>>> {
    let mut grid: Option<Arc<TriadicGrid>> = None;
    for &i in subset {
        let g = tiles[i].q().grid();
        match &grid {
            None => grid = Some(g.clone()),
            Some(h) if h.id() != g.id() => {
                return Err(Error::InvalidArgument("tiles come from different grids".into()));
            }
            _ => {}
        }
    }
    Ok(grid)
}

/// Candidate tops of a tile collection: one representative `ξ` per cell of
/// the arrangement `{Q_t, Q_t°}` and the plates `R_t`, `R_t^{(1)}`, `R_t^{(2)}`.
struct TopSpace {
    subset: Vec<usize>,
    /// Representative point, `ξ ∈ Q_t` flags, `ξ ∈ Q_t ∖ Q_t°` flags (over `subset`).
    cells: Vec<(Vec<f64>, Vec<bool>, Vec<bool>)>,
    plates: Vec<Plate>,
    /// `scl(R_t) ≤ scl(R)` and `R_t ∩ R ≠ ∅` (over `subset`).
    under: Vec<Vec<bool>>,
}

impl TopSpace {
    fn new(tiles: &[Tile], subset: &[usize]) -> Result<Self> {
        common_grid(tiles, subset)?;
        let mut relevant: Vec<TriadicCube> = Vec::new();
        for &i in subset {
            for c in [tiles[i].q().clone(), tiles[i].center_cube()] {
                if !relevant.contains(&c) {
                    relevant.push(c);
                }
            }
        }
        let roots: Vec<TriadicCube> = relevant
            .iter()
            .filter(|c| !relevant.iter().any(|o| o != *c && o.contains(c)))
            .cloned()
            .collect();
        let mut uniform = Vec::new();
        for r in &roots {
            let inner: Vec<&TriadicCube> = relevant.iter().filter(|o| *o != r && r.contains(o)).collect();
            explore(r, &inner, &mut uniform);
        }
        let mut cells: Vec<(Vec<f64>, Vec<bool>, Vec<bool>)> = Vec::new();
        let mut seen: HashMap<(Vec<bool>, Vec<bool>), ()> = HashMap::new();
        for c in uniform {
            let inside: Vec<bool> = subset.iter().map(|&i| tiles[i].q().contains(&c)).collect();
            let lac: Vec<bool> = subset
                .iter()
                .zip(&inside)
                .map(|(&i, &ins)| ins && !tiles[i].center_cube().contains(&c))
                .collect();
            if seen.insert((inside.clone(), lac.clone()), ()).is_none() {
                let lo = c.lower();
                let xi = lo.iter().map(|l| l + c.side() / std::f64::consts::PI).collect();
                cells.push((xi, inside, lac));
            }
        }
        let mut plates: Vec<Plate> = Vec::new();
        for &i in subset {
            let p = tiles[i].plate().clone();
            let p1 = p.parent();
            let p2 = p1.parent();
            for q in [p, p1, p2] {
                if !plates.contains(&q) {
                    plates.push(q);
                }
            }
        }
        let under = plates
            .par_iter()
            .map(|r| {
                subset
                    .iter()
                    .map(|&i| tiles[i].scl() <= r.scl() * (1.0 + 1e-12) && tiles[i].plate().intersects(r))
                    .collect()
            })
            .collect();
        Ok(TopSpace { subset: subset.to_vec(), cells, plates, under })
    }

    /// Members (positions in `subset`) of the maximal lacunary tree with top `(cell, plate)`.
    fn tree(&self, cell: usize, plate: usize) -> Vec<usize> {
        let lac = &self.cells[cell].2;
        let under = &self.under[plate];
        (0..self.subset.len()).filter(|&k| lac[k] && under[k]).collect()
    }
}

fn explore(c: &TriadicCube, inner: &[&TriadicCube], out: &mut Vec<TriadicCube>) {
    if inner.is_empty() {
        out.push(c.clone());
        return;
    }
    for ch in c.children(1).expect("3^d children") {
        let sub: Vec<&TriadicCube> = inner.iter().copied().filter(|o| ch.contains(o)).collect();
        let strict: Vec<&TriadicCube> = sub.iter().copied().filter(|o| **o != ch).collect();
        if sub.is_empty() {
            out.push(ch);
        } else {
            explore(&ch, &strict, out);
        }
    }
}

/// How `size` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    /// Every candidate top; at most [`EXACT_SIZE_LIMIT`] tiles.
    Exact,
    /// Randomly drawn candidate tops; a lower bound.
    Sampled { samples: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct SizeOutcome {
    pub value: f64,
    /// Best tree found, with tile indices into the original slice.
    pub best: Option<Tree>,
    pub exact: bool,
}

fn tree_value(coeffs: &CoefficientTable, subset: &[usize], members: &[usize], plate: &Plate) -> f64 {
    let s: f64 = members.iter().map(|&k| coeffs.f[subset[k]].powi(2)).sum();
    s / plate.measure()
}

/// `size(𝕋′)`: the largest `(|R_T|^{−1} Σ_{t∈T} F(t)²)^{1/2}` over lacunary trees in `subset`.
pub fn size(tiles: &[Tile], coeffs: &CoefficientTable, subset: &[usize], mode: SizeMode) -> Result<SizeOutcome> {
    check_dim(tiles.len(), coeffs.len())?;
    if subset.is_empty() {
        return Ok(SizeOutcome { value: 0.0, best: None, exact: true });
    }
    if mode == SizeMode::Exact && subset.len() > EXACT_SIZE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "{} tiles exceed the exact size limit {EXACT_SIZE_LIMIT}",
            subset.len()
        )));
    }
    let space = TopSpace::new(tiles, subset)?;
    let pairs: Vec<(usize, usize)> = match mode {
        SizeMode::Exact => {
            (0..space.cells.len()).flat_map(|c| (0..space.plates.len()).map(move |p| (c, p))).collect()
        }
        SizeMode::Sampled { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..samples)
                .map(|_| (rng.random_range(0..space.cells.len()), rng.random_range(0..space.plates.len())))
                .collect()
        }
    };
    let mut best: Option<(f64, usize, usize)> = None;
    for (c, p) in pairs {
        let members = space.tree(c, p);
        if members.is_empty() {
            continue;
        }
        let v = tree_value(coeffs, subset, &members, &space.plates[p]);
        if best.is_none_or(|(b, _, _)| v > b) {
            best = Some((v, c, p));
        }
    }
    let exact = mode == SizeMode::Exact;
    Ok(match best {
        None => SizeOutcome { value: 0.0, best: None, exact },
        Some((v, c, p)) => {
            let members: Vec<usize> = space.tree(c, p).iter().map(|&k| subset[k]).collect();
            let top = Top { xi: space.cells[c].0.clone(), plate: space.plates[p].clone() };
            SizeOutcome { value: v.sqrt(), best: Some(Tree::new(tiles, members, top)?), exact }
        }
    })
}

/// Exhaustive size: every nonempty sub-collection is tested for being a
/// lacunary tree under some candidate top, tile by tile.
pub fn size_brute_force(tiles: &[Tile], coeffs: &CoefficientTable, subset: &[usize]) -> Result<f64> {
    if subset.len() > 12 {
        return Err(Error::InvalidArgument("brute force is limited to 12 tiles".into()));
    }
    let space = TopSpace::new(tiles, subset)?;
    let n = subset.len();
    let mut best = 0.0f64;
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| subset[k]).collect();
        let energy: f64 = members.iter().map(|&i| coeffs.f[i].powi(2)).sum();
        for (xi, _, _) in &space.cells {
            let lacunary = members.iter().all(|&i| {
                let t = &tiles[i];
                t.q().contains_point(xi) && !t.center_cube().contains_point(xi)
            });
            if !lacunary {
                continue;
            }
            for r in &space.plates {
                let ok = members.iter().all(|&i| tiles[i].scl() <= r.scl() * (1.0 + 1e-12) && tiles[i].plate().intersects(r));
                if ok {
                    best = best.max(energy / r.measure());
                }
            }
        }
    }
    Ok(best.sqrt())
}

/// `(Σ_t F(t)·A(t))`.
pub fn model_form(coeffs: &CoefficientTable, subset: &[usize]) -> f64 {
    subset.iter().map(|&i| coeffs.f[i] * coeffs.a[i]).sum()
}

/// Ways the strong-disjointness check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NotLacunary,
    StronglyDisjoint,
    ProductsOverlap,
}

/// First failing pair: `(tree, tile)` and, where relevant, `(tree′, tile′)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub first: (usize, usize),
    pub second: Option<(usize, usize)>,
}

/// Checks every tree is lacunary; for `t ∈ T`, `t′ ∈ T′ ≠ T` with
/// `Q_t ⊆ Q_{t′}°`, that `R_{t′} ∩ K²R_T = ∅`; and that the sets `R_t × Q_t°`
/// are pairwise disjoint.
pub fn verify_strongly_disjoint(tiles: &[Tile], family: &[Tree], kn: f64) -> Option<Violation> {
    for (a, tree) in family.iter().enumerate() {
        for &i in &tree.indices {
            let t = &tiles[i];
            if !t.q().contains_point(&tree.top.xi) || t.center_cube().contains_point(&tree.top.xi) {
                return Some(Violation { kind: ViolationKind::NotLacunary, first: (a, i), second: None });
            }
        }
    }
    for (a, ta) in family.iter().enumerate() {
        for (b, tb) in family.iter().enumerate() {
            if a == b {
                continue;
            }
            for &i in &ta.indices {
                for &j in &tb.indices {
                    let centre = tiles[j].center_cube();
                    if centre.contains(tiles[i].q()) && tiles[j].plate().intersects_dilated(&ta.top.plate, kn * kn) {
                        return Some(Violation {
                            kind: ViolationKind::StronglyDisjoint,
                            first: (a, i),
                            second: Some((b, j)),
                        });
                    }
                }
            }
        }
    }
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (a, tree) in family.iter().enumerate() {
        for &i in &tree.indices {
            // a tile shared by two trees overlaps itself
            if let Some(&(b, _)) = all.iter().find(|&&(b, j)| j == i && b != a) {
                return Some(Violation { kind: ViolationKind::ProductsOverlap, first: (b, i), second: Some((a, i)) });
            }
            if !all.iter().any(|&(_, j)| j == i) {
                all.push((a, i));
            }
        }
    }
    for (x, &(a, i)) in all.iter().enumerate() {
        for &(b, j) in &all[x + 1..] {
            let (ci, cj) = (tiles[i].center_cube(), tiles[j].center_cube());
            if ci.intersects(&cj) && tiles[i].plate().intersects(tiles[j].plate()) {
                return Some(Violation { kind: ViolationKind::ProductsOverlap, first: (a, i), second: Some((b, j)) });
            }
        }
    }
    None
}

/// Output of [`size_decompose`].
#[derive(Debug, Clone)]
pub struct SizeDecomposition {
    pub small: Vec<usize>,
    /// The removed sets `ℰ(T)`, each split into trees.
    pub trees: Vec<Tree>,
    /// The selected maximal lacunary trees `T_k`.
    pub selected: Vec<Tree>,
    pub size_input: f64,
    pub size_small: f64,
    /// `Σ |R_T|` over `trees`.
    pub total_measure: f64,
    pub exact: bool,
    /// Selections where the smallest signature was shared.
    pub signature_ties: usize,
}

fn plate_key(p: &Plate) -> (u32, Vec<i64>, i64, Vec<u64>) {
    (p.scale_exp(), p.cube().to_vec(), p.layer(), p.beta().iter().map(|x| x.to_bits()).collect())
}

fn signature_depth(tiles: &[Tile], subset: &[usize]) -> u32 {
    subset.iter().map(|&i| (-tiles[i].q().gen()).max(0) as u32).max().unwrap_or(0)
        + subset.first().map_or(0, |&i| tiles[i].kappa())
        + 2
}

/// Greedy size decomposition: repeatedly removes `ℰ(T)` for the heavy maximal
/// lacunary tree `T` whose top has the smallest signature, until the size of
/// what remains is at most `size(𝕋)/√2`.
pub fn size_decompose(tiles: &[Tile], coeffs: &CoefficientTable, kn: f64, mode: SizeMode) -> Result<SizeDecomposition> {
    let all: Vec<usize> = (0..tiles.len()).collect();
    let mode = match mode {
        SizeMode::Exact if tiles.len() > EXACT_SIZE_LIMIT => SizeMode::Sampled { samples: 20_000, seed: 0 },
        m => m,
    };
    let exact = mode == SizeMode::Exact;
    let sigma = size(tiles, coeffs, &all, mode)?.value;
    let mut out = SizeDecomposition {
        small: all.clone(),
        trees: Vec::new(),
        selected: Vec::new(),
        size_input: sigma,
        size_small: sigma,
        total_measure: 0.0,
        exact,
        signature_ties: 0,
    };
    if sigma == 0.0 {
        out.size_small = 0.0;
        return Ok(out);
    }
    let Some(grid) = common_grid(tiles, &all)? else { return Ok(out) };
    let depth = signature_depth(tiles, &all);
    let kappa = tiles[0].kappa();
    let threshold = sigma * sigma / 2.0;
    let mut remaining = all;
    loop {
        let current = size(tiles, coeffs, &remaining, mode)?.value;
        out.size_small = current;
        if current <= sigma / 2f64.sqrt() || remaining.is_empty() {
            break;
        }
        let space = TopSpace::new(tiles, &remaining)?;
        let mut choice: Option<(Signature, (u32, Vec<i64>, i64, Vec<u64>), usize, usize)> = None;
        let mut tie = false;
        let mut sigs: HashMap<usize, Signature> = HashMap::new();
        for c in 0..space.cells.len() {
            for p in 0..space.plates.len() {
                let members = space.tree(c, p);
                if members.is_empty() {
                    continue;
                }
                let energy: f64 = members.iter().map(|&k| coeffs.f[remaining[k]].powi(2)).sum();
                if energy <= threshold * space.plates[p].measure() {
                    continue;
                }
                let sig = match sigs.get(&c) {
                    Some(s) => s.clone(),
                    None => {
                        let s = signature(&space.cells[c].0, &grid, kappa, depth)?;
                        sigs.insert(c, s.clone());
                        s
                    }
                };
                let key = plate_key(&space.plates[p]);
                let better = match &choice {
                    None => true,
                    Some((s0, k0, _, _)) => match sig.cmp_digits(s0) {
                        Ordering::Less => true,
                        Ordering::Equal => {
                            tie = true;
                            key < *k0
                        }
                        Ordering::Greater => false,
                    },
                };
                if better {
                    choice = Some((sig, key, c, p));
                }
            }
        }
        let Some((_, _, c, p)) = choice else {
            return Err(Error::Degenerate("no heavy tree although size exceeds the threshold".into()));
        };
        out.signature_ties += usize::from(tie);
        let xi = space.cells[c].0.clone();
        let top_plate = space.plates[p].clone();
        let members: Vec<usize> = space.tree(c, p).iter().map(|&k| remaining[k]).collect();
        out.selected.push(Tree::new(tiles, members, Top { xi: xi.clone(), plate: top_plate.clone() })?);
        let enlarged: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| tiles[i].q().contains_point(&xi) && tiles[i].plate().intersects_dilated(&top_plate, kn * kn))
            .collect();
        out.trees.extend(split_enlarged(tiles, &enlarged, &xi, &top_plate, kn)?);
        remaining.retain(|i| !enlarged.contains(i));
    }
    out.total_measure = out.trees.iter().map(Tree::measure).sum();
    out.small = remaining;
    Ok(out)
}

/// Splits `ℰ(T)` into trees with tops `(ξ_T, R′)`, `R′` ranging over the
/// plates of the scale and orientation of `R_T` that meet `K²R_T`; tiles that
/// fit none of them become single-tile trees.
fn split_enlarged(tiles: &[Tile], enlarged: &[usize], xi: &[f64], top: &Plate, kn: f64) -> Result<Vec<Tree>> {
    let reach = (kn * kn).ceil() as i64 + 1;
    let n = top.n();
    let mut neighbors: Vec<Plate> = Vec::new();
    let mut offsets = vec![-reach; n];
    loop {
        let z: Vec<i64> = top.cube().iter().zip(&offsets).map(|(z, o)| z + o).collect();
        let j = top.layer() + offsets[n - 1];
        let p = Plate::new(top.beta().as_slice(), top.scale_exp(), z, j)?;
        if p.intersects_dilated(top, kn * kn) {
            neighbors.push(p);
        }
        let mut a = 0;
        loop {
            if a == n {
                break;
            }
            offsets[a] += 1;
            if offsets[a] <= reach {
                break;
            }
            offsets[a] = -reach;
            a += 1;
        }
        if a == n {
            break;
        }
    }
    neighbors.sort_by_key(plate_key);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); neighbors.len()];
    let mut singles = Vec::new();
    for &i in enlarged {
        let t = &tiles[i];
        let slot = if t.scl() <= top.scl() * (1.0 + 1e-12) {
            neighbors.iter().position(|r| t.plate().intersects(r))
        } else {
            None
        };
        match slot {
            Some(s) => groups[s].push(i),
            None => singles.push(i),
        }
    }
    let mut out = Vec::new();
    for (g, r) in groups.into_iter().zip(neighbors) {
        if !g.is_empty() {
            out.push(Tree::new(tiles, g, Top { xi: xi.to_vec(), plate: r })?);
        }
    }
    for i in singles {
        out.push(Tree::new(tiles, vec![i], Top { xi: xi.to_vec(), plate: tiles[i].plate().clone() })?);
    }
    Ok(out)
}

/// A measurable direction field sampled on a box of cells: each cell carries
/// a unit normal `v_{σ(x)}` and an `E` flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionField {
    origin: Vec<f64>,
    cell: f64,
    shape: Vec<usize>,
    normals: Vec<DVector<f64>>,
    mask: Vec<bool>,
}

impl DirectionField {
    /// Cells `origin + cell·(i + [0,1)^n)`, `i < shape`, in row-major order.
    pub fn new(origin: Vec<f64>, cell: f64, shape: Vec<usize>, normals: Vec<DVector<f64>>, mask: Vec<bool>) -> Result<Self> {
        let n = origin.len();
        check_dim(n, shape.len())?;
        let count: usize = shape.iter().product();
        check_dim(count, normals.len())?;
        check_dim(count, mask.len())?;
        if !(cell > 0.0) {
            return Err(Error::InvalidArgument("cell size must be positive".into()));
        }
        let mut normals = normals;
        for v in &mut normals {
            check_dim(n, v.len())?;
            let r = v.norm();
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::NonFinite("direction field normal".into()));
            }
            *v /= if v[n - 1] < 0.0 { -r } else { r };
        }
        Ok(DirectionField { origin, cell, shape, normals, mask })
    }

    /// Builds the field from a function of the cell center.
    pub fn from_fn(origin: Vec<f64>, cell: f64, shape: Vec<usize>, mut f: impl FnMut(&[f64]) -> (DVector<f64>, bool)) -> Result<Self> {
        let count: usize = shape.iter().product();
        let mut normals = Vec::with_capacity(count);
        let mut mask = Vec::with_capacity(count);
        for k in 0..count {
            let c = cell_center(&origin, cell, &shape, k);
            let (v, e) = f(&c);
            normals.push(v);
            mask.push(e);
        }
        DirectionField::new(origin, cell, shape, normals, mask)
    }

    pub fn n(&self) -> usize {
        self.origin.len()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn normals(&self) -> &[DVector<f64>] {
        &self.normals
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn cell_center(&self, k: usize) -> Vec<f64> {
        cell_center(&self.origin, self.cell, &self.shape, k)
    }

    /// Lower corner of cell `k`.
    pub fn cell_lower(&self, k: usize) -> Vec<f64> {
        self.cell_center(k).iter().map(|c| c - self.cell / 2.0).collect()
    }

    /// Cell containing `x`, if inside the box.
    pub fn cell_index(&self, x: &[f64]) -> Option<usize> {
        let mut k = 0;
        for a in 0..self.n() {
            let i = ((x[a] - self.origin[a]) / self.cell).floor();
            if i < 0.0 || i >= self.shape[a] as f64 {
                return None;
            }
            k = k * self.shape[a] + i as usize;
        }
        Some(k)
    }

    /// `|E|`.
    pub fn e_measure(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 * self.cell.powi(self.n() as i32)
    }

    /// Same field with `E` replaced.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        check_dim(self.mask.len(), mask.len())?;
        Ok(DirectionField { mask, ..self.clone() })
    }

    /// Checks `|v_σ − e_n| < α` everywhere.
    pub fn validate(&self, alpha: f64) -> Result<()> {
        let n = self.n();
        for (k, v) in self.normals.iter().enumerate() {
            let mut w = v.clone();
            w[n - 1] -= 1.0;
            if w.norm() >= alpha {
                return Err(Error::Precondition(format!("field direction at cell {k} is outside Σ_α")));
            }
        }
        Ok(())
    }
}

fn cell_center(origin: &[f64], cell: f64, shape: &[usize], mut k: usize) -> Vec<f64> {
    let n = origin.len();
    let mut c = vec![0.0; n];
    for a in (0..n).rev() {
        let i = k % shape[a];
        k /= shape[a];
        c[a] = origin[a] + cell * (i as f64 + 0.5);
    }
    c
}

/// Riemann-sum parameters for `∫_{E_t} Sy¹_{R_t}χ_M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityParams {
    /// Decay order of `χ_M(y) = ⟨y⟩^{−M}`.
    pub m: u32,
    /// The sum runs over plate-local `y ∈ [−w, w]^n`.
    pub half_width: f64,
    pub step: f64,
}

impl DensityParams {
    pub fn new(n: usize) -> Self {
        DensityParams { m: 10 * n as u32, half_width: 6.0, step: 0.125 }
    }
}

/// `∫_{E_t} Sy¹_{R_t}χ_M`, computed in plate coordinates `x = c + O(scl·y′, y_n)`.
pub fn tile_mass(t: &Tile, field: &DirectionField, params: &DensityParams) -> f64 {
    let n = field.n();
    let plate = t.plate();
    let sc = plate.scl();
    let c = plate.center();
    let frame = plate.frame();
    let steps = (2.0 * params.half_width / params.step).round() as usize;
    let mut flags: HashMap<usize, bool> = HashMap::new();
    let mut total = 0.0;
    let count = steps.pow(n as u32);
    let mut y = vec![0.0; n];
    for k in 0..count {
        let mut r = k;
        for a in (0..n).rev() {
            y[a] = -params.half_width + params.step * ((r % steps) as f64 + 0.5);
            r /= steps;
        }
        let r2: f64 = y.iter().map(|v| v * v).sum();
        let weight = (1.0 + r2).powf(-(params.m as f64) / 2.0);
        if weight < 1e-18 {
            continue;
        }
        let local = DVector::from_fn(n, |a, _| if a + 1 < n { sc * y[a] } else { y[a] });
        let x = &c + frame * local;
        let Some(cell) = field.cell_index(x.as_slice()) else { continue };
        let inside = *flags
            .entry(cell)
            .or_insert_with(|| field.mask[cell] && t.in_alpha(field.normals[cell].as_slice(), None));
        if inside {
            total += weight;
        }
    }
    total * params.step.powi(n as i32)
}

/// Masses `∫_{E_t} Sy¹χ` for every tile and the order relation among them.
#[derive(Debug, Clone)]
pub struct DensityTable {
    pub mass: Vec<f64>,
    above: Vec<Vec<usize>>,
}

impl DensityTable {
    pub fn new(tiles: &[Tile], field: &DirectionField, params: &DensityParams) -> Self {
        let mass = tiles.par_iter().map(|t| tile_mass(t, field, params)).collect();
        let above = (0..tiles.len())
            .into_par_iter()
            .map(|i| (0..tiles.len()).filter(|&j| leq(&tiles[i], &tiles[j])).collect())
            .collect();
        DensityTable { mass, above }
    }

    /// `dense(t)`: the largest mass over peers `t′ ≥ t`.
    pub fn density(&self, i: usize) -> f64 {
        self.above[i].iter().map(|&j| self.mass[j]).fold(0.0, f64::max)
    }

    /// `dense(𝕋′) = sup_{t∈𝕋′} dense(t)`.
    pub fn density_of(&self, subset: &[usize]) -> f64 {
        subset.iter().map(|&i| self.density(i)).fold(0.0, f64::max)
    }
}

/// `dense(t)` with respect to `peers` (indices into `tiles`, `t` included).
pub fn density(tiles: &[Tile], t: usize, field: &DirectionField, peers: &[usize], params: &DensityParams) -> f64 {
    peers
        .iter()
        .chain(std::iter::once(&t))
        .filter(|&&j| leq(&tiles[t], &tiles[j]))
        .map(|&j| tile_mass(&tiles[j], field, params))
        .fold(0.0, f64::max)
}

/// Output of [`density_decompose`].
#[derive(Debug, Clone)]
pub struct DensityDecomposition {
    pub light: Vec<usize>,
    pub trees: Vec<Tree>,
    pub dense_input: f64,
    pub dense_light: f64,
    /// `Σ|R_T| · dense(𝕋) / |E|`.
    pub constant: f64,
}

/// Removes every tile of density above `dense(𝕋)/2` into trees
/// `{t : t ≤ t₀}` built around a remaining heavy tile `t₀` of largest scale.
pub fn density_decompose(tiles: &[Tile], field: &DirectionField, params: &DensityParams) -> Result<DensityDecomposition> {
    let table = DensityTable::new(tiles, field, params);
    let all: Vec<usize> = (0..tiles.len()).collect();
    let delta = table.density_of(&all);
    if delta == 0.0 {
        return Ok(DensityDecomposition { light: all, trees: Vec::new(), dense_input: 0.0, dense_light: 0.0, constant: 0.0 });
    }
    let (mut heavy, light): (Vec<usize>, Vec<usize>) = all.into_iter().partition(|&i| table.density(i) > delta / 2.0);
    let mut trees = Vec::new();
    while !heavy.is_empty() {
        let &t0 = heavy
            .iter()
            .max_by(|&&a, &&b| tiles[a].scl().total_cmp(&tiles[b].scl()).then(b.cmp(&a)))
            .expect("nonempty");
        let members: Vec<usize> = heavy.iter().copied().filter(|&i| leq(&tiles[i], &tiles[t0])).collect();
        let top = Top { xi: tiles[t0].q().center(), plate: tiles[t0].plate().clone() };
        heavy.retain(|i| !members.contains(i));
        trees.push(Tree::new(tiles, members, top)?);
    }
    let e = field.e_measure();
    let total: f64 = trees.iter().map(Tree::measure).sum();
    Ok(DensityDecomposition {
        dense_light: table.density_of(&light),
        light,
        trees,
        dense_input: delta,
        constant: if e > 0.0 { total * delta / e } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{canonical_tile, generate_tiles, unchart, TileGenSpec};

    fn random_table(n: usize, seed: u64) -> CoefficientTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = (0..n).map(|_| rng.random::<f64>().powi(2) * 10.0).collect();
        let a = (0..n).map(|_| rng.random::<f64>()).collect();
        CoefficientTable::new(f, a, 20, 100).unwrap()
    }

    fn tiles(seed: u64, count: usize, depth: u32) -> Vec<Tile> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_tiles(&TileGenSpec::new(1, count, depth), &mut rng).unwrap()
    }

    fn std_tile(gen: i64, z: i64, lattice: [i64; 2]) -> Tile {
        let q = TriadicCube::new(TriadicGrid::standard(1), gen, vec![z]).unwrap();
        canonical_tile(q, &lattice, 9).unwrap()
    }

    #[test]
    fn order_relation_basics() {
        let t = std_tile(-2, 0, [0, 0]);
        assert!(leq(&t, &t));
        let finer = std_tile(-3, 1, [0, 0]);
        assert!(t.q().contains(finer.q()));
        assert!(leq(&t, &finer));
        let far = std_tile(-3, 1, [0, 5]);
        assert!(!leq(&t, &far));
        assert!(!leq(&finer, &t));
    }

    #[test]
    fn order_is_not_transitive() {
        // witness found by a search over generated sets with a wide frequency spread
        let spec = TileGenSpec { spread: 0.5, lateral: 1, vertical: 2, ..TileGenSpec::new(1, 40, 4) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ts = generate_tiles(&spec, &mut rng).unwrap();
        let (a, b, c) = WITNESS;
        assert!(leq(&ts[a], &ts[b]) && leq(&ts[b], &ts[c]));
        assert!(!leq(&ts[a], &ts[c]));
    }

    const WITNESS: (usize, usize, usize) = (16, 17, 5);

    #[test]
    fn signature_limits() {
        let g = TriadicGrid::standard(1);
        // the center of the unit cube is centered at every generation
        let s = signature(&[0.5], &g, 3, 12).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(!s.perturbed);
        // a point near a corner is never centered
        let s = signature(&[0.01 / std::f64::consts::PI], &g, 3, 4).unwrap();
        assert!(s.digits.iter().all(|&a| a == 1));
        let s = signature(&[1e-13 + 1.0 / 7.0 / 3f64.powi(25)], &g, 3, 20).unwrap();
        assert!((s.value - 0.5).abs() <= 3f64.powi(-20));
    }

    #[test]
    fn signature_matches_cube_walk() {
        let g = TriadicGrid::standard(1);
        let kappa = 3;
        for xi in [0.4 * 3f64.powi(-5), 0.5 + 0.3 * 3f64.powi(-7), 0.123_456, 0.5 - 1.0 / 81.0 / 7.0] {
            let s = signature(&[xi], &g, kappa, 6).unwrap();
            let mut q = g.cube_containing(&[xi], 0).unwrap();
            for j in 0..6 {
                q = q.descendant_containing(&[xi], 1).unwrap();
                let inside = q.center_child(kappa).contains_point(&[xi]);
                assert_eq!(s.digits[j], u8::from(!inside), "ξ = {xi}, j = {}", j + 1);
            }
        }
    }

    #[test]
    fn signature_perturbs_triadic_points() {
        let g = TriadicGrid::standard(1);
        let s = signature(&[1.0 / 3.0], &g, 1, 5).unwrap();
        assert!(s.perturbed);
    }

    #[test]
    fn size_trivial_cases() {
        let ts = vec![std_tile(-2, 0, [0, 0])];
        let c = CoefficientTable::new(vec![3.0], vec![1.0], 20, 100).unwrap();
        let v = size(&ts, &c, &[0], SizeMode::Exact).unwrap().value;
        assert!((v - 3.0 / ts[0].plate().measure().sqrt()).abs() < 1e-12);
        let zero = CoefficientTable::new(vec![0.0], vec![0.0], 20, 100).unwrap();
        assert_eq!(size(&ts, &zero, &[0], SizeMode::Exact).unwrap().value, 0.0);
        assert_eq!(size(&ts, &c, &[], SizeMode::Exact).unwrap().value, 0.0);
    }

    #[test]
    fn exact_size_agrees_with_brute_force() {
        for seed in 0..12 {
            let ts = tiles(seed, 8, 3);
            let c = random_table(8, seed);
            let all: Vec<usize> = (0..8).collect();
            let exact = size(&ts, &c, &all, SizeMode::Exact).unwrap();
            let brute = size_brute_force(&ts, &c, &all).unwrap();
            assert_eq!(exact.value, brute, "seed {seed}");
            let best = exact.best.unwrap();
            assert_eq!(best.kind, TreeKind::Lacunary);
        }
    }

    #[test]
    fn size_is_monotone_under_inclusion() {
        let ts = tiles(3, 20, 4);
        let c = random_table(20, 3);
        let all: Vec<usize> = (0..20).collect();
        let full = size(&ts, &c, &all, SizeMode::Exact).unwrap().value;
        let half: Vec<usize> = (0..20).step_by(2).collect();
        assert!(size(&ts, &c, &half, SizeMode::Exact).unwrap().value <= full + 1e-12);
        let sampled = size(&ts, &c, &all, SizeMode::Sampled { samples: 500, seed: 1 }).unwrap();
        assert!(!sampled.exact && sampled.value <= full + 1e-12);
    }

    #[test]
    fn size_rejects_large_sets_in_exact_mode() {
        let ts = tiles(1, 70, 4);
        let c = random_table(70, 1);
        let all: Vec<usize> = (0..70).collect();
        assert!(size(&ts, &c, &all, SizeMode::Exact).is_err());
    }

    #[test]
    fn size_decompose_halves_and_is_strongly_disjoint() {
        for seed in 0..6 {
            let ts = tiles(seed, 32, 4);
            let c = random_table(32, seed + 100);
            let kn = crate::tiling::measure_kn(&ts);
            let dec = size_decompose(&ts, &c, kn, SizeMode::Exact).unwrap();
            let again = size(&ts, &c, &dec.small, SizeMode::Exact).unwrap().value;
            assert!(again <= dec.size_input / 2f64.sqrt() + 1e-12);
            assert_eq!(verify_strongly_disjoint(&ts, &dec.selected, kn), None, "seed {seed}");
            let mut seen: Vec<usize> = dec.small.clone();
            for t in &dec.trees {
                seen.extend(&t.indices);
            }
            seen.sort_unstable();
            assert_eq!(seen, (0..32).collect::<Vec<_>>());
            // signatures are ordered along nested centers
            for (a, ta) in dec.selected.iter().enumerate() {
                for (b, tb) in dec.selected.iter().enumerate() {
                    if a == b {
                        continue;
                    }
                    let nested = ta.indices.iter().any(|&i| tb.indices.iter().any(|&j| ts[j].center_cube().contains(ts[i].q())));
                    if nested {
                        let g = ts[0].q().grid();
                        let sa = signature(&ta.top.xi, g, 9, 20).unwrap();
                        let sb = signature(&tb.top.xi, g, 9, 20).unwrap();
                        assert!(sa.value < sb.value);
                    }
                }
            }
        }
    }

    #[test]
    fn size_decompose_trivial_cases() {
        let ts = tiles(2, 6, 2);
        let zero = CoefficientTable::new(vec![0.0; 6], vec![0.0; 6], 20, 100).unwrap();
        let dec = size_decompose(&ts, &zero, 2.0, SizeMode::Exact).unwrap();
        assert_eq!(dec.small.len(), 6);
        assert!(dec.trees.is_empty());
        let mut f = vec![0.0; 6];
        f[4] = 5.0;
        let one = CoefficientTable::new(f, vec![0.0; 6], 20, 100).unwrap();
        let dec = size_decompose(&ts, &one, 2.0, SizeMode::Exact).unwrap();
        assert_eq!(dec.selected.len(), 1);
        assert_eq!(dec.selected[0].indices, vec![4]);
    }

    #[test]
    fn strong_disjointness_detects_a_violation() {
        let outer = std_tile(-2, 0, [0, 0]);
        let centre = outer.center_cube();
        // a tile whose cube sits inside the center of `outer`, sharing the plate region
        let inner_q = centre.descendant(1, &[0]);
        let inner = canonical_tile(inner_q, &[0, 0], 9).unwrap();
        let ts = vec![outer.clone(), inner.clone()];
        let xi_outer = outer.q().lower().iter().map(|l| l + outer.q().side() * 0.1).collect();
        let xi_inner = inner.q().lower().iter().map(|l| l + inner.q().side() * 0.1).collect();
        let t1 = Tree::new(&ts, vec![0], Top { xi: xi_outer, plate: outer.plate().clone() }).unwrap();
        let t2 = Tree::new(&ts, vec![1], Top { xi: xi_inner, plate: inner.plate().clone() }).unwrap();
        assert_eq!(verify_strongly_disjoint(&ts, &[t1.clone()], 2.0), None);
        let v = verify_strongly_disjoint(&ts, &[t1, t2], 2.0).unwrap();
        assert_eq!(v.kind, ViolationKind::StronglyDisjoint);
        assert_eq!(v.first, (1, 1));
        assert_eq!(v.second, Some((0, 0)));
    }

    #[test]
    fn model_form_is_linear() {
        let c = random_table(5, 9);
        assert_eq!(model_form(&c, &[]), 0.0);
        let mut d = c.clone();
        d.f.iter_mut().for_each(|x| *x *= 3.0);
        let all: Vec<usize> = (0..5).collect();
        assert!((model_form(&d, &all) - 3.0 * model_form(&c, &all)).abs() < 1e-12);
    }

    fn field_for(t: &Tile, in_alpha: bool, full: bool) -> DirectionField {
        // a direction inside (or far outside) the peripheral set of `t`
        let q = t.q();
        let y = if in_alpha { q.lower()[0] + q.side() * 0.05 } else { q.center()[0] };
        let v = unchart(&[y]);
        assert_eq!(t.in_alpha(v.as_slice(), None), in_alpha);
        let shape = vec![200, 40];
        DirectionField::from_fn(vec![-100.0, -20.0], 1.0, shape, |_| (v.clone(), full)).unwrap()
    }

    #[test]
    fn density_of_full_set_is_the_bump_integral() {
        let t = std_tile(-2, 0, [0, 0]);
        let params = DensityParams::new(2);
        let f = field_for(&t, true, true);
        let m = tile_mass(&t, &f, &params);
        // ∫_{ℝ²} ⟨y⟩^{−20} dy = π/9
        assert!((m - std::f64::consts::PI / 9.0).abs() < 1e-3, "{m}");
        assert_eq!(tile_mass(&t, &field_for(&t, true, false), &params), 0.0);
        assert_eq!(tile_mass(&t, &field_for(&t, false, true), &params), 0.0);
    }

    #[test]
    fn density_is_monotone_in_e() {
        let ts = tiles(4, 12, 3);
        let v = unchart(&[ts[0].q().lower()[0] + ts[0].q().side() * 0.05]);
        let field = DirectionField::from_fn(vec![-200.0, -20.0], 1.0, vec![400, 40], |c| (v.clone(), c[0] > 0.0)).unwrap();
        let bigger = field.with_mask(vec![true; field.len()]).unwrap();
        let params = DensityParams::new(2);
        let peers: Vec<usize> = (0..12).collect();
        for i in 0..12 {
            let a = density(&ts, i, &field, &peers, &params);
            let b = density(&ts, i, &bigger, &peers, &params);
            assert!(a <= b + 1e-15);
        }
    }

    #[test]
    fn density_decompose_cases() {
        let ts = tiles(5, 32, 4);
        let v = unchart(&[ts[3].q().lower()[0] + ts[3].q().side() * 0.05]);
        let empty = DirectionField::from_fn(vec![-200.0, -20.0], 1.0, vec![400, 40], |_| (v.clone(), false)).unwrap();
        let params = DensityParams::new(2);
        let dec = density_decompose(&ts, &empty, &params).unwrap();
        assert_eq!(dec.light.len(), 32);
        assert!(dec.trees.is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let field = DirectionField::from_fn(vec![-200.0, -20.0], 1.0, vec![400, 40], |_| {
            let t = &ts[rng.random_range(0..ts.len())];
            let y = t.q().lower()[0] + t.q().side() * rng.random_range(0.0..0.2);
            (unchart(&[y]), rng.random::<f64>() < 0.5)
        })
        .unwrap();
        let dec = density_decompose(&ts, &field, &params).unwrap();
        assert!(dec.dense_input > 0.0);
        let table = DensityTable::new(&ts, &field, &params);
        assert!(table.density_of(&dec.light) <= dec.dense_input / 2.0);
        let mut seen = dec.light.clone();
        for t in &dec.trees {
            seen.extend(&t.indices);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..32).collect::<Vec<_>>());
        assert!(dec.constant.is_finite());

        let single = vec![ts[3].clone()];
        let dec = density_decompose(&single, &field_for(&single[0], true, true), &params).unwrap();
        assert_eq!(dec.trees.len(), 1);
        assert!(dec.light.is_empty());
    }

    #[test]
    fn direction_sets_nest_along_overlapping_trees() {
        let ts = tiles(8, 40, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v = unchart(&[rng.random_range(-0.1..0.1)]);
            for a in &ts {
                for b in &ts {
                    if a.q().contains(b.q()) && a.q() != b.q() && a.center_cube().contains(b.q()) {
                        // α_b ⊂ Q_b ⊆ Q_a° which α_a avoids
                        assert!(!(a.in_alpha(v.as_slice(), None) && b.in_alpha(v.as_slice(), None)));
                    }
                }
            }
        }
    }
}
