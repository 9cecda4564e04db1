//! Nested 2D quadrilateral meshes.
//!
//! A hierarchy is a sequence of meshes with element size halving per level.
//! Finer levels are produced by quadrisection with midpoint coordinates, so
//! every coarse node exists on every finer level with bit-identical
//! coordinates; cross-level statistics are evaluated at the level-0
//! ("common") nodes.
//!
//! Coordinates are in cm, tractions in N/cm.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::MeshError;
use crate::real::{real, Real};

/// Tolerance for matching node coordinates across levels, in cm.
pub const COMMON_NODE_TOL: f64 = 1e-10;

/// Traction applied to one element edge. Edge `e` runs from local node `e`
/// to local node `(e + 1) % 4`, counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeumannEdge<T> {
    pub element: usize,
    pub edge: usize,
    pub traction: [T; 2],
}

/// A single quadrilateral mesh level.
#[derive(Debug, Clone)]
pub struct Mesh2D<T> {
    pub level: usize,
    /// Node coordinates (x, y).
    pub nodes: Vec<[T; 2]>,
    /// 4-node connectivity, counter-clockwise.
    pub elements: Vec<[usize; 4]>,
    /// Nodes with both displacement components fixed to zero.
    pub dirichlet_nodes: Vec<usize>,
    pub neumann_edges: Vec<NeumannEdge<T>>,
}

impl<T: Real> Mesh2D<T> {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Characteristic element size: sqrt of the mean element area.
    pub fn element_size(&self) -> T {
        let mut area = T::zero();
        for e in &self.elements {
            area += self.element_area(e);
        }
        (area / real(self.n_elements() as f64)).sqrt()
    }

    fn element_area(&self, e: &[usize; 4]) -> T {
        // shoelace formula
        let mut a = T::zero();
        for k in 0..4 {
            let p = self.nodes[e[k]];
            let q = self.nodes[e[(k + 1) % 4]];
            a += p[0] * q[1] - q[0] * p[1];
        }
        a * real(0.5)
    }

    /// Check element connectivity, Jacobian positivity at the 2x2 Gauss
    /// points and Dirichlet/Neumann disjointness.
    pub fn validate(&self) -> Result<(), MeshError> {
        let nn = self.n_nodes();
        let gp = 1.0 / 3.0f64.sqrt();
        let gauss = [[-gp, -gp], [gp, -gp], [gp, gp], [-gp, gp]];
        for (ei, e) in self.elements.iter().enumerate() {
            for &n in e {
                if n >= nn {
                    return Err(MeshError::NodeIdOutOfRange {
                        element: ei,
                        node: n,
                        nodes: nn,
                    });
                }
            }
            for a in 0..4 {
                for b in a + 1..4 {
                    if e[a] == e[b] {
                        return Err(MeshError::DegenerateElement {
                            element: ei,
                            msg: format!("repeated node id {}", e[a]),
                        });
                    }
                }
            }
            for [xi, eta] in gauss {
                let det = self.jacobian_det(e, real(xi), real(eta));
                if det <= T::zero() {
                    return Err(MeshError::DegenerateElement {
                        element: ei,
                        msg: format!("non-positive Jacobian {det} at gauss point"),
                    });
                }
            }
        }
        for ne in &self.neumann_edges {
            if ne.element >= self.n_elements() || ne.edge >= 4 {
                return Err(MeshError::InvalidGeometry(format!(
                    "neumann edge references element {} edge {}",
                    ne.element, ne.edge
                )));
            }
        }
        for &d in &self.dirichlet_nodes {
            if d >= nn {
                return Err(MeshError::InvalidGeometry(format!(
                    "dirichlet node id {d} out of range"
                )));
            }
        }
        let dirichlet: std::collections::BTreeSet<usize> =
            self.dirichlet_nodes.iter().copied().collect();
        for ne in &self.neumann_edges {
            let e = &self.elements[ne.element];
            for &n in &[e[ne.edge], e[(ne.edge + 1) % 4]] {
                if dirichlet.contains(&n) {
                    return Err(MeshError::BoundaryOverlap(n));
                }
            }
        }
        Ok(())
    }

    fn jacobian_det(&self, e: &[usize; 4], xi: T, eta: T) -> T {
        let q = real::<T>(0.25);
        let one = T::one();
        let dn_dxi = [
            -q * (one - eta),
            q * (one - eta),
            q * (one + eta),
            -q * (one + eta),
        ];
        let dn_deta = [
            -q * (one - xi),
            -q * (one + xi),
            q * (one + xi),
            q * (one - xi),
        ];
        let (mut j00, mut j01, mut j10, mut j11) = (T::zero(), T::zero(), T::zero(), T::zero());
        for a in 0..4 {
            let p = self.nodes[e[a]];
            j00 += dn_dxi[a] * p[0];
            j01 += dn_dxi[a] * p[1];
            j10 += dn_deta[a] * p[0];
            j11 += dn_deta[a] * p[1];
        }
        j00 * j11 - j01 * j10
    }

    /// Quadrisect every element. New nodes are edge midpoints and element
    /// centers computed as exact coordinate averages, so parent nodes keep
    /// both their ids and their coordinate bits.
    pub fn refine(&self) -> Mesh2D<T> {
        use std::collections::BTreeMap;
        let half = real::<T>(0.5);
        let quarter = real::<T>(0.25);
        let mut nodes = self.nodes.clone();
        let mut edge_mid: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut mid = |a: usize, b: usize, nodes: &mut Vec<[T; 2]>| -> usize {
            let key = (a.min(b), a.max(b));
            *edge_mid.entry(key).or_insert_with(|| {
                let p = nodes[a];
                let q = nodes[b];
                nodes.push([(p[0] + q[0]) * half, (p[1] + q[1]) * half]);
                nodes.len() - 1
            })
        };

        let mut elements = Vec::with_capacity(4 * self.n_elements());
        // children[parent * 4 + corner] = child element id
        for e in &self.elements {
            let m = [
                mid(e[0], e[1], &mut nodes),
                mid(e[1], e[2], &mut nodes),
                mid(e[2], e[3], &mut nodes),
                mid(e[3], e[0], &mut nodes),
            ];
            let p0 = nodes[e[0]];
            let p1 = nodes[e[1]];
            let p2 = nodes[e[2]];
            let p3 = nodes[e[3]];
            nodes.push([
                (p0[0] + p1[0] + p2[0] + p3[0]) * quarter,
                (p0[1] + p1[1] + p2[1] + p3[1]) * quarter,
            ]);
            let ctr = nodes.len() - 1;
            elements.push([e[0], m[0], ctr, m[3]]);
            elements.push([e[1], m[1], ctr, m[0]]);
            elements.push([e[2], m[2], ctr, m[1]]);
            elements.push([e[3], m[3], ctr, m[2]]);
        }

        let dirichlet: std::collections::BTreeSet<usize> =
            self.dirichlet_nodes.iter().copied().collect();
        let mut dirichlet_nodes = self.dirichlet_nodes.clone();
        for (&(a, b), &m) in &edge_mid {
            if dirichlet.contains(&a) && dirichlet.contains(&b) {
                dirichlet_nodes.push(m);
            }
        }
        dirichlet_nodes.sort_unstable();

        // parent edge e: child (corner e) edge 0 and child (corner e+1) edge 3
        let mut neumann_edges = Vec::with_capacity(2 * self.neumann_edges.len());
        for ne in &self.neumann_edges {
            let base = ne.element * 4;
            neumann_edges.push(NeumannEdge {
                element: base + ne.edge,
                edge: 0,
                traction: ne.traction,
            });
            neumann_edges.push(NeumannEdge {
                element: base + (ne.edge + 1) % 4,
                edge: 3,
                traction: ne.traction,
            });
        }

        Mesh2D {
            level: self.level + 1,
            nodes,
            elements,
            dirichlet_nodes,
            neumann_edges,
        }
    }
}

/// A nested sequence of meshes for levels 0..=L plus, per level, the map
/// from level-0 node ids to the coinciding node ids on that level.
#[derive(Debug, Clone)]
pub struct MeshHierarchy<T> {
    pub meshes: Vec<Mesh2D<T>>,
    /// `common_nodes[l][i0]` = node id on level `l` at the coordinates of
    /// level-0 node `i0`.
    pub common_nodes: Vec<Vec<usize>>,
}

impl<T: Real> MeshHierarchy<T> {
    /// Assemble a hierarchy from per-level meshes, validating each level and
    /// the cross-level nesting.
    pub fn from_meshes(meshes: Vec<Mesh2D<T>>) -> Result<Self, MeshError> {
        if meshes.is_empty() {
            return Err(MeshError::InvalidGeometry("hierarchy has no levels".into()));
        }
        for m in &meshes {
            m.validate()?;
        }
        for l in 1..meshes.len() {
            let ratio = (meshes[l - 1].element_size() / meshes[l].element_size()).to_f64_lossy();
            if !(1.75..=2.25).contains(&ratio) {
                return Err(MeshError::InvalidGeometry(format!(
                    "element size ratio between levels {} and {} is {ratio:.3}, expected 2",
                    l - 1,
                    l
                )));
            }
        }
        let mut common_nodes = Vec::with_capacity(meshes.len());
        for (l, fine) in meshes.iter().enumerate() {
            common_nodes.push(match_nodes(&meshes[0], fine, l)?);
        }
        Ok(Self {
            meshes,
            common_nodes,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.meshes.len()
    }

    pub fn finest(&self) -> &Mesh2D<T> {
        self.meshes.last().expect("hierarchy is never empty")
    }

    pub fn n_common_nodes(&self) -> usize {
        self.meshes[0].n_nodes()
    }

    /// Coordinates of the common nodes, by level-0 node id.
    pub fn common_coords(&self) -> &[[T; 2]] {
        &self.meshes[0].nodes
    }
}

/// For each node of `coarse`, locate the coinciding node of `fine`.
fn match_nodes<T: Real>(
    coarse: &Mesh2D<T>,
    fine: &Mesh2D<T>,
    level: usize,
) -> Result<Vec<usize>, MeshError> {
    let tol = real::<T>(COMMON_NODE_TOL);
    // sort fine nodes by x to restrict each query to a window
    let mut by_x: Vec<usize> = (0..fine.n_nodes()).collect();
    by_x.sort_by(|&a, &b| {
        fine.nodes[a][0]
            .partial_cmp(&fine.nodes[b][0])
            .expect("NaN coordinate")
    });
    let xs: Vec<T> = by_x.iter().map(|&i| fine.nodes[i][0]).collect();

    let mut map = Vec::with_capacity(coarse.n_nodes());
    for (i0, p) in coarse.nodes.iter().enumerate() {
        let lo = xs.partition_point(|&x| x < p[0] - tol);
        let mut found = None;
        for k in lo..xs.len() {
            if xs[k] > p[0] + tol {
                break;
            }
            let cand = by_x[k];
            if (fine.nodes[cand][1] - p[1]).abs() <= tol {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(j) => map.push(j),
            None => {
                return Err(MeshError::NestingViolation {
                    node0: i0,
                    level,
                    x: p[0].to_f64_lossy(),
                    y: p[1].to_f64_lossy(),
                })
            }
        }
    }
    Ok(map)
}

/// Structured plate hierarchy: `nx0 x ny0` quads on level 0, refined
/// `levels` times. Bottom edge fixed, top edge loaded with a uniform
/// downward traction normalized to a 1 N resultant (the solve scales it).
pub fn build_plate_hierarchy<T: Real>(
    width: T,
    height: T,
    nx0: usize,
    ny0: usize,
    levels: usize,
) -> Result<MeshHierarchy<T>, MeshError> {
    if width <= T::zero() || height <= T::zero() {
        return Err(MeshError::InvalidGeometry(format!(
            "plate dimensions must be positive, got {width} x {height}"
        )));
    }
    if nx0 == 0 || ny0 == 0 {
        return Err(MeshError::InvalidGeometry(
            "need at least one element per direction".into(),
        ));
    }

    let mut nodes = Vec::with_capacity((nx0 + 1) * (ny0 + 1));
    for j in 0..=ny0 {
        for i in 0..=nx0 {
            let x = width * real(i as f64) / real(nx0 as f64);
            let y = height * real(j as f64) / real(ny0 as f64);
            nodes.push([x, y]);
        }
    }
    let mut elements = Vec::with_capacity(nx0 * ny0);
    for j in 0..ny0 {
        for i in 0..nx0 {
            let n0 = j * (nx0 + 1) + i;
            elements.push([n0, n0 + 1, n0 + nx0 + 2, n0 + nx0 + 1]);
        }
    }
    let dirichlet_nodes: Vec<usize> = (0..=nx0).collect();
    // top row elements, local edge 2; traction for a unit resultant
    let ty = -T::one() / width;
    let neumann_edges: Vec<NeumannEdge<T>> = (0..nx0)
        .map(|i| NeumannEdge {
            element: (ny0 - 1) * nx0 + i,
            edge: 2,
            traction: [T::zero(), ty],
        })
        .collect();

    let mut meshes = vec![Mesh2D {
        level: 0,
        nodes,
        elements,
        dirichlet_nodes,
        neumann_edges,
    }];
    for _ in 0..levels {
        let next = meshes.last().expect("non-empty").refine();
        meshes.push(next);
    }
    MeshHierarchy::from_meshes(meshes)
}

// ---------------------------------------------------------------------------
// plain-text mesh files: one hierarchy per directory, one file per level
// ---------------------------------------------------------------------------

/// Serialize one mesh level in the text format read by [`read_mesh`].
pub fn format_mesh<T: Real>(mesh: &Mesh2D<T>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "nodes {}", mesh.n_nodes());
    for (i, p) in mesh.nodes.iter().enumerate() {
        let _ = writeln!(
            s,
            "{} {:.17e} {:.17e}",
            i,
            p[0].to_f64_lossy(),
            p[1].to_f64_lossy()
        );
    }
    let _ = writeln!(s, "elements {}", mesh.n_elements());
    for (i, e) in mesh.elements.iter().enumerate() {
        let _ = writeln!(s, "{} {} {} {} {}", i, e[0], e[1], e[2], e[3]);
    }
    let _ = writeln!(s, "dirichlet {}", mesh.dirichlet_nodes.len());
    for d in &mesh.dirichlet_nodes {
        let _ = writeln!(s, "{d}");
    }
    let _ = writeln!(s, "neumann {}", mesh.neumann_edges.len());
    for ne in &mesh.neumann_edges {
        let _ = writeln!(
            s,
            "{} {} {:.17e} {:.17e}",
            ne.element,
            ne.edge,
            ne.traction[0].to_f64_lossy(),
            ne.traction[1].to_f64_lossy()
        );
    }
    s
}

/// Write the whole hierarchy as `mesh_l{l}.txt` files under `dir`.
pub fn save_mesh_hierarchy<T: Real>(
    hierarchy: &MeshHierarchy<T>,
    dir: &Path,
) -> Result<(), MeshError> {
    std::fs::create_dir_all(dir).map_err(|e| MeshError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    for (l, mesh) in hierarchy.meshes.iter().enumerate() {
        let path = dir.join(format!("mesh_l{l}.txt"));
        std::fs::write(&path, format_mesh(mesh)).map_err(|e| MeshError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

struct LineParser<'a> {
    path: &'a str,
    tokens: Vec<(usize, String)>, // (line number, token)
    pos: usize,
}

impl<'a> LineParser<'a> {
    fn new(path: &'a str, text: &str) -> Self {
        let mut tokens = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            for tok in line.split_whitespace() {
                tokens.push((ln + 1, tok.to_string()));
            }
        }
        Self {
            path,
            tokens,
            pos: 0,
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> MeshError {
        MeshError::Parse {
            path: self.path.to_string(),
            line,
            msg: msg.into(),
        }
    }

    fn next_token(&mut self, what: &str) -> Result<(usize, &str), MeshError> {
        let last_line = self.tokens.last().map(|t| t.0).unwrap_or(1);
        if self.pos >= self.tokens.len() {
            return Err(self.err(last_line, format!("unexpected end of file, wanted {what}")));
        }
        let (ln, ref tok) = self.tokens[self.pos];
        self.pos += 1;
        Ok((ln, tok.as_str()))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), MeshError> {
        let (ln, tok) = self.next_token(&format!("keyword '{kw}'"))?;
        if tok != kw {
            let tok = tok.to_string();
            return Err(self.err(ln, format!("expected '{kw}', found '{tok}'")));
        }
        Ok(())
    }

    fn usize_val(&mut self, what: &str) -> Result<usize, MeshError> {
        let (ln, tok) = self.next_token(what)?;
        let tok_owned = tok.to_string();
        tok_owned
            .parse::<usize>()
            .map_err(|_| self.err(ln, format!("invalid {what}: '{tok_owned}'")))
    }

    fn f64_val(&mut self, what: &str) -> Result<f64, MeshError> {
        let (ln, tok) = self.next_token(what)?;
        let tok_owned = tok.to_string();
        tok_owned
            .parse::<f64>()
            .map_err(|_| self.err(ln, format!("invalid {what}: '{tok_owned}'")))
    }
}

/// Parse one mesh level from the plain-text format.
pub fn read_mesh<T: Real>(path: &Path, level: usize) -> Result<Mesh2D<T>, MeshError> {
    let text = std::fs::read_to_string(path).map_err(|e| MeshError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let path_str = path.display().to_string();
    let mut p = LineParser::new(&path_str, &text);

    p.keyword("nodes")?;
    let nn = p.usize_val("node count")?;
    let mut nodes = vec![None; nn];
    for _ in 0..nn {
        let id = p.usize_val("node id")?;
        let x = p.f64_val("x coordinate")?;
        let y = p.f64_val("y coordinate")?;
        if id >= nn {
            return Err(p.err(0, format!("node id {id} out of range (count {nn})")));
        }
        nodes[id] = Some([real::<T>(x), real::<T>(y)]);
    }
    let nodes: Vec<[T; 2]> = nodes
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or_else(|| p.err(0, format!("node id {i} missing"))))
        .collect::<Result<_, _>>()?;

    p.keyword("elements")?;
    let ne = p.usize_val("element count")?;
    let mut elements = vec![None; ne];
    for _ in 0..ne {
        let id = p.usize_val("element id")?;
        let mut conn = [0usize; 4];
        for c in conn.iter_mut() {
            *c = p.usize_val("element node id")?;
        }
        if id >= ne {
            return Err(p.err(0, format!("element id {id} out of range (count {ne})")));
        }
        elements[id] = Some(conn);
    }
    let elements: Vec<[usize; 4]> = elements
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.ok_or_else(|| p.err(0, format!("element id {i} missing"))))
        .collect::<Result<_, _>>()?;

    p.keyword("dirichlet")?;
    let nd = p.usize_val("dirichlet count")?;
    let mut dirichlet_nodes = Vec::with_capacity(nd);
    for _ in 0..nd {
        dirichlet_nodes.push(p.usize_val("dirichlet node id")?);
    }

    p.keyword("neumann")?;
    let nne = p.usize_val("neumann count")?;
    let mut neumann_edges = Vec::with_capacity(nne);
    for _ in 0..nne {
        let element = p.usize_val("neumann element id")?;
        let edge = p.usize_val("neumann edge index")?;
        let tx = p.f64_val("traction x")?;
        let ty = p.f64_val("traction y")?;
        neumann_edges.push(NeumannEdge {
            element,
            edge,
            traction: [real::<T>(tx), real::<T>(ty)],
        });
    }

    Ok(Mesh2D {
        level,
        nodes,
        elements,
        dirichlet_nodes,
        neumann_edges,
    })
}

/// Load `mesh_l0.txt`, `mesh_l1.txt`, ... from a directory and validate the
/// hierarchy, including the cross-level common-node maps.
pub fn load_mesh_hierarchy<T: Real>(dir: &Path) -> Result<MeshHierarchy<T>, MeshError> {
    let mut meshes = Vec::new();
    loop {
        let path = dir.join(format!("mesh_l{}.txt", meshes.len()));
        if !path.exists() {
            break;
        }
        meshes.push(read_mesh(&path, meshes.len())?);
    }
    if meshes.is_empty() {
        return Err(MeshError::Io {
            path: dir.join("mesh_l0.txt").display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no mesh files found"),
        });
    }
    MeshHierarchy::from_meshes(meshes)
}
