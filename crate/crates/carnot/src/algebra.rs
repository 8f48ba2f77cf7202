//! Exact arithmetic in step-2 Carnot groups presented in exponential
//! coordinates of the first kind.
//!
//! A group element is a pair `(x_H, x_V)` with `x_H` in `R^r` (horizontal
//! layer) and `x_V` in `R^m` (bracket layer). The product is
//!
//! ```text
//! (x . y)_H    = x_H + y_H
//! (x . y)_V[k] = x_V[k] + y_V[k] + 1/2 * sum_{i>j} c[k][i][j] (x_i y_j - x_j y_i)
//! ```
//!
//! For the free group of rank `r` the bracket layer has dimension
//! `P = r(r-1)/2` and `c` is the canonical pairing of index pairs `(i, j)`,
//! `i > j`, with basis slots of the bracket layer.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CarnotError, Result};

/// One structure constant `c[k][i][j] = value` with `i > j`.
/// Antisymmetric completion (`c[k][j][i] = -value`) is implicit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BracketEntry {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Presentation of a step-2 Carnot group: rank of the horizontal layer,
/// dimension of the bracket layer, and the structure constants tying them.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStructure {
    rank: usize,
    vertical_dim: usize,
    entries: Vec<BracketEntry>,
    free: bool,
}

/// Enumerates the index pairs `(i, j)` with `i > j` in lexicographic order.
/// This fixes the layout of the bracket layer of the free group.
pub fn free_pairs(rank: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(rank * (rank - 1) / 2);
    for i in 1..rank {
        for j in 0..i {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Slot of the pair `(i, j)`, `i > j`, in the free bracket layer.
pub fn free_pair_index(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

impl GroupStructure {
    /// The free step-2 group with `rank` generators.
    pub fn free(rank: usize) -> Result<Arc<GroupStructure>> {
        if rank < 2 {
            return Err(CarnotError::InvalidStructure(format!(
                "rank must be at least 2, got {rank}"
            )));
        }
        let entries = free_pairs(rank)
            .into_iter()
            .enumerate()
            .map(|(k, (i, j))| BracketEntry { k, i, j, value: 1.0 })
            .collect();
        Ok(Arc::new(GroupStructure {
            rank,
            vertical_dim: rank * (rank - 1) / 2,
            entries,
            free: true,
        }))
    }

    /// A step-2 group from explicit structure constants. Entries must have
    /// `i > j` and the bracket map must span the whole vertical layer.
    pub fn from_constants(
        rank: usize,
        vertical_dim: usize,
        entries: Vec<BracketEntry>,
    ) -> Result<Arc<GroupStructure>> {
        if rank < 2 {
            return Err(CarnotError::InvalidStructure(format!(
                "rank must be at least 2, got {rank}"
            )));
        }
        if vertical_dim == 0 {
            return Err(CarnotError::InvalidStructure(
                "vertical dimension must be positive".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if e.j >= e.i {
                return Err(CarnotError::InvalidStructure(format!(
                    "entry ({}, {}, {}) must satisfy i > j",
                    e.k, e.i, e.j
                )));
            }
            if e.i >= rank || e.k >= vertical_dim {
                return Err(CarnotError::InvalidStructure(format!(
                    "entry ({}, {}, {}) out of range",
                    e.k, e.i, e.j
                )));
            }
            if !e.value.is_finite() {
                return Err(CarnotError::InvalidStructure("non-finite constant".into()));
            }
            if !seen.insert((e.k, e.i, e.j)) {
                return Err(CarnotError::InvalidStructure(format!(
                    "duplicate entry ({}, {}, {})",
                    e.k, e.i, e.j
                )));
            }
        }
        let structure = GroupStructure {
            rank,
            vertical_dim,
            entries,
            free: false,
        };
        if structure.bracket_matrix_rank() < vertical_dim {
            return Err(CarnotError::InvalidStructure(
                "brackets of the horizontal layer do not span the vertical layer".into(),
            ));
        }
        // Recognize the canonical free presentation so callers get the
        // free-only operations (isometries, curve synthesis).
        let mut s = structure;
        s.free = s.is_canonical_free();
        Ok(Arc::new(s))
    }

    /// Parse `{ "rank": r, "vertical_dim": m, "c": [[k, i, j, value], ...] }`.
    pub fn from_json(text: &str) -> Result<Arc<GroupStructure>> {
        #[derive(Deserialize)]
        struct Data {
            rank: usize,
            vertical_dim: usize,
            c: Vec<(usize, usize, usize, f64)>,
        }
        let data: Data = serde_json::from_str(text)
            .map_err(|e| CarnotError::Serialization(e.to_string()))?;
        let entries = data
            .c
            .into_iter()
            .map(|(k, i, j, value)| BracketEntry { k, i, j, value })
            .collect();
        GroupStructure::from_constants(data.rank, data.vertical_dim, entries)
    }

    pub fn to_json(&self) -> String {
        let c: Vec<(usize, usize, usize, f64)> = self
            .entries
            .iter()
            .map(|e| (e.k, e.i, e.j, e.value))
            .collect();
        serde_json::json!({
            "rank": self.rank,
            "vertical_dim": self.vertical_dim,
            "c": c,
        })
        .to_string()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn vertical_dim(&self) -> usize {
        self.vertical_dim
    }

    pub fn dim(&self) -> usize {
        self.rank + self.vertical_dim
    }

    /// Homogeneous dimension `Q = r + 2m`.
    pub fn homogeneous_dim(&self) -> usize {
        self.rank + 2 * self.vertical_dim
    }

    pub fn is_free(&self) -> bool {
        self.free
    }

    pub fn entries(&self) -> &[BracketEntry] {
        &self.entries
    }

    fn is_canonical_free(&self) -> bool {
        let p = self.rank * (self.rank - 1) / 2;
        if self.vertical_dim != p || self.entries.len() != p {
            return false;
        }
        self.entries
            .iter()
            .all(|e| e.k == free_pair_index(e.i, e.j) && e.value == 1.0)
    }

    /// `v[k] = 1/2 sum_{i>j} c[k][i][j] (x_i y_j - x_j y_i)` — the vertical
    /// increment of the product of two elements with horizontal parts `x`, `y`.
    pub fn bracket_term(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.vertical_dim];
        for e in &self.entries {
            v[e.k] += 0.5 * e.value * (x[e.i] * y[e.j] - x[e.j] * y[e.i]);
        }
        v
    }

    /// The antisymmetric matrix `C_k` with `x^T C_k y = sum c[k][i][j](x_i y_j - x_j y_i)`.
    pub fn bracket_form(&self, k: usize) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.rank, self.rank);
        for e in &self.entries {
            if e.k == k {
                c[(e.i, e.j)] += e.value;
                c[(e.j, e.i)] -= e.value;
            }
        }
        c
    }

    /// The `m x P` matrix sending the free bracket slot of `(i, j)` to
    /// `(c[k][i][j])_k`.
    pub fn bracket_matrix(&self) -> DMatrix<f64> {
        let p = self.rank * (self.rank - 1) / 2;
        let mut mat = DMatrix::zeros(self.vertical_dim, p);
        for e in &self.entries {
            mat[(e.k, free_pair_index(e.i, e.j))] += e.value;
        }
        mat
    }

    fn bracket_matrix_rank(&self) -> usize {
        matrix_rank(&self.bracket_matrix())
    }
}

fn matrix_rank(mat: &DMatrix<f64>) -> usize {
    let scale = mat.amax().max(1.0);
    let mut a = mat.clone();
    let (rows, cols) = a.shape();
    let tol = 1e-12 * scale;
    let mut rank = 0;
    let mut col = 0;
    while rank < rows && col < cols {
        let mut pivot = rank;
        for r in rank..rows {
            if a[(r, col)].abs() > a[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if a[(pivot, col)].abs() <= tol {
            col += 1;
            continue;
        }
        a.swap_rows(rank, pivot);
        for r in (rank + 1)..rows {
            let f = a[(r, col)] / a[(rank, col)];
            for c in col..cols {
                a[(r, c)] -= f * a[(rank, c)];
            }
        }
        rank += 1;
        col += 1;
    }
    rank
}

pub(crate) fn same_structure(a: &Arc<GroupStructure>, b: &Arc<GroupStructure>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// A group element in exponential coordinates of the first kind.
#[derive(Debug, Clone)]
pub struct GroupPoint {
    structure: Arc<GroupStructure>,
    horizontal: Vec<f64>,
    vertical: Vec<f64>,
}

impl GroupPoint {
    pub fn new(
        structure: &Arc<GroupStructure>,
        horizontal: Vec<f64>,
        vertical: Vec<f64>,
    ) -> Result<GroupPoint> {
        if horizontal.len() != structure.rank() || vertical.len() != structure.vertical_dim() {
            return Err(CarnotError::InvalidArgument(format!(
                "coordinate lengths ({}, {}) do not match structure ({}, {})",
                horizontal.len(),
                vertical.len(),
                structure.rank(),
                structure.vertical_dim()
            )));
        }
        if horizontal.iter().chain(vertical.iter()).any(|v| !v.is_finite()) {
            return Err(CarnotError::InvalidArgument(
                "coordinates must be finite".into(),
            ));
        }
        Ok(GroupPoint {
            structure: structure.clone(),
            horizontal,
            vertical,
        })
    }

    /// Point from the flat coordinate vector `(x_H, x_V)`.
    pub fn from_coordinates(structure: &Arc<GroupStructure>, coords: &[f64]) -> Result<GroupPoint> {
        if coords.len() != structure.dim() {
            return Err(CarnotError::InvalidArgument(format!(
                "expected {} coordinates, got {}",
                structure.dim(),
                coords.len()
            )));
        }
        let r = structure.rank();
        GroupPoint::new(structure, coords[..r].to_vec(), coords[r..].to_vec())
    }

    pub fn zero(structure: &Arc<GroupStructure>) -> GroupPoint {
        GroupPoint {
            structure: structure.clone(),
            horizontal: vec![0.0; structure.rank()],
            vertical: vec![0.0; structure.vertical_dim()],
        }
    }

    pub fn structure(&self) -> &Arc<GroupStructure> {
        &self.structure
    }

    /// Horizontal projection `p(x)`.
    pub fn horizontal(&self) -> &[f64] {
        &self.horizontal
    }

    pub fn vertical(&self) -> &[f64] {
        &self.vertical
    }

    pub fn coordinates(&self) -> Vec<f64> {
        let mut c = self.horizontal.clone();
        c.extend_from_slice(&self.vertical);
        c
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.horizontal.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn vertical_norm(&self) -> f64 {
        self.vertical.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.horizontal.iter().all(|&v| v == 0.0) && self.vertical.iter().all(|&v| v == 0.0)
    }

    /// Group product.
    pub fn multiply(&self, other: &GroupPoint) -> Result<GroupPoint> {
        if !same_structure(&self.structure, &other.structure) {
            return Err(CarnotError::StructureMismatch(
                "multiply requires both points in the same group".into(),
            ));
        }
        let horizontal: Vec<f64> = self
            .horizontal
            .iter()
            .zip(&other.horizontal)
            .map(|(a, b)| a + b)
            .collect();
        let twist = self.structure.bracket_term(&self.horizontal, &other.horizontal);
        let vertical: Vec<f64> = self
            .vertical
            .iter()
            .zip(&other.vertical)
            .zip(twist)
            .map(|((a, b), t)| a + b + t)
            .collect();
        Ok(GroupPoint {
            structure: self.structure.clone(),
            horizontal,
            vertical,
        })
    }

    /// Group inverse `x^{-1} = -x`.
    pub fn inverse(&self) -> GroupPoint {
        GroupPoint {
            structure: self.structure.clone(),
            horizontal: self.horizontal.iter().map(|v| -v).collect(),
            vertical: self.vertical.iter().map(|v| -v).collect(),
        }
    }

    /// Anisotropic dilation: weight 1 on the horizontal layer, 2 on the
    /// bracket layer.
    pub fn dilate(&self, lambda: f64) -> Result<GroupPoint> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(CarnotError::InvalidArgument(format!(
                "dilation factor must be positive and finite, got {lambda}"
            )));
        }
        Ok(GroupPoint {
            structure: self.structure.clone(),
            horizontal: self.horizontal.iter().map(|v| lambda * v).collect(),
            vertical: self.vertical.iter().map(|v| lambda * lambda * v).collect(),
        })
    }

    /// `x . exp(t E)`, the horizontal line through `x` in direction `E`.
    pub fn flow_line(&self, direction: &HorizontalVector, t: f64) -> Result<GroupPoint> {
        let step = exp_horizontal(&self.structure, &direction.scale(t))?;
        self.multiply(&step)
    }
}

/// Element of the horizontal layer, as coefficients in the fixed
/// orthonormal basis of first-layer fields.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalVector {
    coefficients: Vec<f64>,
}

impl HorizontalVector {
    pub fn new(coefficients: Vec<f64>) -> Result<HorizontalVector> {
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(CarnotError::InvalidArgument(
                "horizontal coefficients must be finite".into(),
            ));
        }
        Ok(HorizontalVector { coefficients })
    }

    /// The `i`-th basis field as a horizontal vector of the given rank.
    pub fn basis(rank: usize, i: usize) -> HorizontalVector {
        let mut c = vec![0.0; rank];
        c[i] = 1.0;
        HorizontalVector { coefficients: c }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// The norm `omega(E)`; the basis fields are orthonormal for it.
    pub fn omega(&self) -> f64 {
        self.coefficients.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, t: f64) -> HorizontalVector {
        HorizontalVector {
            coefficients: self.coefficients.iter().map(|v| t * v).collect(),
        }
    }

    pub fn normalized(&self) -> Result<HorizontalVector> {
        let n = self.omega();
        if n == 0.0 {
            return Err(CarnotError::DegenerateDirection(
                "cannot normalize the zero vector".into(),
            ));
        }
        Ok(self.scale(1.0 / n))
    }

    /// Value of the left-invariant field `E` at the point `x`, as a tangent
    /// vector in coordinates.
    pub fn field_value(&self, x: &GroupPoint) -> Result<Vec<f64>> {
        if self.coefficients.len() != x.structure().rank() {
            return Err(CarnotError::InvalidArgument(
                "direction rank does not match the point".into(),
            ));
        }
        let mut v = self.coefficients.clone();
        v.extend(x.structure().bracket_term(x.horizontal(), &self.coefficients));
        Ok(v)
    }
}

/// `exp(E)` for a first-layer element: horizontal part the coefficients,
/// vertical part zero.
pub fn exp_horizontal(
    structure: &Arc<GroupStructure>,
    direction: &HorizontalVector,
) -> Result<GroupPoint> {
    if direction.coefficients().len() != structure.rank() {
        return Err(CarnotError::InvalidArgument(format!(
            "direction has {} coefficients, structure rank is {}",
            direction.coefficients().len(),
            structure.rank()
        )));
    }
    GroupPoint::new(
        structure,
        direction.coefficients().to_vec(),
        vec![0.0; structure.vertical_dim()],
    )
}

/// A graded group automorphism `(x_H, x_V) -> (A x_H, B x_V)` of a free
/// group, with `A` orthogonal and `B` the induced map on the bracket layer.
/// Such maps preserve products, the horizontal norm, and curve lengths.
#[derive(Debug, Clone)]
pub struct IsometryMap {
    structure: Arc<GroupStructure>,
    horizontal_part: DMatrix<f64>,
    vertical_part: DMatrix<f64>,
}

/// Induced action of `A` on the bracket layer of the free group:
/// the slot of `(i, j)` maps to `sum_{k>l} (A_ki A_lj - A_li A_kj) e_{kl}`.
fn induced_vertical(a: &DMatrix<f64>) -> DMatrix<f64> {
    let r = a.nrows();
    let pairs = free_pairs(r);
    let p = pairs.len();
    let mut b = DMatrix::zeros(p, p);
    for (col, &(i, j)) in pairs.iter().enumerate() {
        for (row, &(k, l)) in pairs.iter().enumerate() {
            b[(row, col)] = a[(k, i)] * a[(l, j)] - a[(l, i)] * a[(k, j)];
        }
    }
    b
}

impl IsometryMap {
    /// Build the map from an orthogonal matrix on the horizontal layer.
    pub fn from_orthogonal(
        structure: &Arc<GroupStructure>,
        horizontal_part: DMatrix<f64>,
    ) -> Result<IsometryMap> {
        if !structure.is_free() {
            return Err(CarnotError::InvalidArgument(
                "isometries of this form are only available on free groups".into(),
            ));
        }
        let r = structure.rank();
        if horizontal_part.shape() != (r, r) {
            return Err(CarnotError::InvalidArgument(
                "horizontal part has the wrong shape".into(),
            ));
        }
        let gram = horizontal_part.transpose() * &horizontal_part;
        let err = (&gram - DMatrix::<f64>::identity(r, r)).amax();
        if err > 1e-12 {
            return Err(CarnotError::InvalidArgument(format!(
                "horizontal part is not orthogonal (defect {err:.3e})"
            )));
        }
        let vertical_part = induced_vertical(&horizontal_part);
        Ok(IsometryMap {
            structure: structure.clone(),
            horizontal_part,
            vertical_part,
        })
    }

    pub fn identity(structure: &Arc<GroupStructure>) -> Result<IsometryMap> {
        IsometryMap::from_orthogonal(structure, DMatrix::identity(structure.rank(), structure.rank()))
    }

    pub fn horizontal_part(&self) -> &DMatrix<f64> {
        &self.horizontal_part
    }

    pub fn vertical_part(&self) -> &DMatrix<f64> {
        &self.vertical_part
    }

    pub fn apply(&self, x: &GroupPoint) -> Result<GroupPoint> {
        if !same_structure(&self.structure, x.structure()) {
            return Err(CarnotError::StructureMismatch(
                "isometry and point live on different groups".into(),
            ));
        }
        let h = &self.horizontal_part * DVector::from_column_slice(x.horizontal());
        let v = &self.vertical_part * DVector::from_column_slice(x.vertical());
        GroupPoint::new(&self.structure, h.as_slice().to_vec(), v.as_slice().to_vec())
    }

    pub fn apply_vector(&self, e: &HorizontalVector) -> HorizontalVector {
        let h = &self.horizontal_part * DVector::from_column_slice(e.coefficients());
        HorizontalVector {
            coefficients: h.as_slice().to_vec(),
        }
    }

    pub fn inverse(&self) -> IsometryMap {
        let at = self.horizontal_part.transpose();
        let vertical_part = induced_vertical(&at);
        IsometryMap {
            structure: self.structure.clone(),
            horizontal_part: at,
            vertical_part,
        }
    }
}

/// Rotation aligning the horizontal projection of `y` with the first
/// coordinate axis: the returned map `F` satisfies
/// `F(y) = (|p(y)|, 0, ..., 0, *)`.
///
/// The choice is canonical: a Householder reflection sending `p(y)/|p(y)|`
/// to `e_1`, with one row negated to land in the rotation group.
pub fn horizontal_isometry(y: &GroupPoint) -> Result<IsometryMap> {
    let structure = y.structure();
    if !structure.is_free() {
        return Err(CarnotError::InvalidArgument(
            "horizontal alignment requires a free structure".into(),
        ));
    }
    let r = structure.rank();
    let norm = y.horizontal_norm();
    if norm == 0.0 {
        return Err(CarnotError::DegenerateDirection(
            "point has zero horizontal projection".into(),
        ));
    }
    let v = DVector::from_iterator(r, y.horizontal().iter().map(|c| c / norm));

    // Householder vector toward -sign(v_1) e_1 avoids cancellation.
    let alpha: f64 = if v[0] >= 0.0 { -1.0 } else { 1.0 };
    let mut w = v.clone();
    w[0] -= alpha;
    let wn2 = w.norm_squared();
    let mut a = DMatrix::identity(r, r);
    if wn2 > 0.0 {
        let outer = &w * w.transpose() * (2.0 / wn2);
        a -= outer;
    }
    if alpha < 0.0 {
        // Reflected onto -e_1: flip the first row to reach +e_1. The two
        // negations cancel in the determinant, so this is already a rotation.
        for c in 0..r {
            a[(0, c)] = -a[(0, c)];
        }
    } else {
        // Mapping onto +e_1 directly: restore det +1 with a row untouched
        // by e_1 (r >= 2 always holds).
        for c in 0..r {
            a[(r - 1, c)] = -a[(r - 1, c)];
        }
    }
    IsometryMap::from_orthogonal(structure, a)
}

/// A layer-preserving homomorphism from the free group of rank `r` onto a
/// step-2 group presented by structure constants. It is the identity on the
/// horizontal layer and linear on bracket layers.
#[derive(Debug, Clone)]
pub struct HomomorphismSpec {
    source: Arc<GroupStructure>,
    target: Arc<GroupStructure>,
    vertical_map: DMatrix<f64>,
}

/// Homomorphism from the free cover onto the group presented by `target`.
pub fn build_quotient(target: &Arc<GroupStructure>) -> Result<HomomorphismSpec> {
    let source = GroupStructure::free(target.rank())?;
    let vertical_map = target.bracket_matrix();
    if matrix_rank(&vertical_map) < target.vertical_dim() {
        return Err(CarnotError::InvalidStructure(
            "brackets do not span the target vertical layer".into(),
        ));
    }
    Ok(HomomorphismSpec {
        source,
        target: target.clone(),
        vertical_map,
    })
}

impl HomomorphismSpec {
    pub fn source(&self) -> &Arc<GroupStructure> {
        &self.source
    }

    pub fn target(&self) -> &Arc<GroupStructure> {
        &self.target
    }

    pub fn vertical_map(&self) -> &DMatrix<f64> {
        &self.vertical_map
    }

    /// Apply the homomorphism: horizontal coordinates unchanged, vertical
    /// coordinates mapped linearly.
    pub fn apply(&self, x: &GroupPoint) -> Result<GroupPoint> {
        if !same_structure(&self.source, x.structure()) {
            return Err(CarnotError::StructureMismatch(
                "point is not in the source group".into(),
            ));
        }
        let v = &self.vertical_map * DVector::from_column_slice(x.vertical());
        GroupPoint::new(
            &self.target,
            x.horizontal().to_vec(),
            v.as_slice().to_vec(),
        )
    }

    /// A preimage of a target point: horizontal part copied, vertical part
    /// the least-norm solution of the linear system.
    pub fn preimage(&self, y: &GroupPoint) -> Result<GroupPoint> {
        if !same_structure(&self.target, y.structure()) {
            return Err(CarnotError::StructureMismatch(
                "point is not in the target group".into(),
            ));
        }
        let vm = &self.vertical_map;
        let gram = vm * vm.transpose();
        let rhs = DVector::from_column_slice(y.vertical());
        let sol = gram.lu().solve(&rhs).ok_or_else(|| {
            CarnotError::InvalidStructure("vertical map lost rank".into())
        })?;
        let v = vm.transpose() * sol;
        GroupPoint::new(&self.source, y.horizontal().to_vec(), v.as_slice().to_vec())
    }
}

/// Apply a homomorphism to a point (operation form of [`HomomorphismSpec::apply`]).
pub fn apply_hom(hom: &HomomorphismSpec, x: &GroupPoint) -> Result<GroupPoint> {
    hom.apply(x)
}
