//! Structured triangular mesh of the diode cross-section (-1,1)^2.
//!
//! The square is divided into nx-by-ny grid cells, each split along the
//! diagonal from its lower-left to its upper-right corner. Nodes are numbered
//! row-major by y then x, so node (ix, iy) has index iy*(nx+1)+ix. The top
//! edge y = +1 is the measurement contact GammaN, the bottom edge y = -1 the
//! driven contact GammaP; the side edges are insulating (Neumann). Corners
//! belong to the contacts. The pn-junction sits on y = 0: OmegaP is y < 0,
//! OmegaN is y >= 0 (junction nodes tie-break to OmegaN).

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    GammaN,
    GammaP,
    NeumannLeft,
    NeumannRight,
    Interior,
}

impl BoundaryTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryTag::GammaN => "gamma_n",
            BoundaryTag::GammaP => "gamma_p",
            BoundaryTag::NeumannLeft => "neumann_left",
            BoundaryTag::NeumannRight => "neumann_right",
            BoundaryTag::Interior => "interior",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    OmegaN,
    OmegaP,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::OmegaN => "omega_n",
            Region::OmegaP => "omega_p",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    nx: usize,
    ny: usize,
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    node_tags: Vec<BoundaryTag>,
    node_regions: Vec<Region>,
    tri_regions: Vec<Region>,
    /// Triangles adjacent to each node, for gradient recovery at contacts.
    node_tris: Vec<Vec<usize>>,
    hash: String,
}

impl Mesh {
    pub fn build(nx: usize, ny: usize) -> Result<Mesh> {
        if nx == 0 || ny == 0 {
            return Err(Error::Mesh(format!(
                "subdivision counts must be positive, got nx={nx}, ny={ny}"
            )));
        }

        let n_nodes = (nx + 1) * (ny + 1);
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut node_tags = Vec::with_capacity(n_nodes);
        let mut node_regions = Vec::with_capacity(n_nodes);
        for iy in 0..=ny {
            let y = -1.0 + 2.0 * (iy as f64) / (ny as f64);
            for ix in 0..=nx {
                let x = -1.0 + 2.0 * (ix as f64) / (nx as f64);
                nodes.push([x, y]);
                // Contacts claim the corners; sides are Neumann only strictly
                // between the contacts.
                let tag = if iy == ny {
                    BoundaryTag::GammaN
                } else if iy == 0 {
                    BoundaryTag::GammaP
                } else if ix == 0 {
                    BoundaryTag::NeumannLeft
                } else if ix == nx {
                    BoundaryTag::NeumannRight
                } else {
                    BoundaryTag::Interior
                };
                node_tags.push(tag);
                node_regions.push(if y < 0.0 { Region::OmegaP } else { Region::OmegaN });
            }
        }

        let idx = |ix: usize, iy: usize| iy * (nx + 1) + ix;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        let mut tri_regions = Vec::with_capacity(2 * nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                let ll = idx(ix, iy);
                let lr = idx(ix + 1, iy);
                let ul = idx(ix, iy + 1);
                let ur = idx(ix + 1, iy + 1);
                // Split along the ll-ur diagonal; both triangles counterclockwise.
                triangles.push([ll, lr, ur]);
                triangles.push([ll, ur, ul]);
            }
        }
        for tri in &triangles {
            let cy = (nodes[tri[0]][1] + nodes[tri[1]][1] + nodes[tri[2]][1]) / 3.0;
            tri_regions.push(if cy < 0.0 { Region::OmegaP } else { Region::OmegaN });
        }

        let mut node_tris = vec![Vec::new(); n_nodes];
        for (t, tri) in triangles.iter().enumerate() {
            for &n in tri {
                node_tris[n].push(t);
            }
        }

        let mut hasher = Sha256::new();
        hasher.update((nx as u64).to_le_bytes());
        hasher.update((ny as u64).to_le_bytes());
        for p in &nodes {
            hasher.update(p[0].to_le_bytes());
            hasher.update(p[1].to_le_bytes());
        }
        let digest = hasher.finalize();
        let hash: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();

        Ok(Mesh {
            nx,
            ny,
            nodes,
            triangles,
            node_tags,
            node_regions,
            tri_regions,
            node_tris,
            hash,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Grid spacing in x (the domain is 2 units wide).
    pub fn hx(&self) -> f64 {
        2.0 / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        2.0 / self.ny as f64
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn node(&self, i: usize) -> [f64; 2] {
        self.nodes[i]
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangle(&self, t: usize) -> [usize; 3] {
        self.triangles[t]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    pub fn node_tag(&self, i: usize) -> BoundaryTag {
        self.node_tags[i]
    }

    pub fn node_region(&self, i: usize) -> Region {
        self.node_regions[i]
    }

    pub fn triangle_region(&self, t: usize) -> Region {
        self.tri_regions[t]
    }

    pub fn triangles_at_node(&self, i: usize) -> &[usize] {
        &self.node_tris[i]
    }

    /// Top-contact nodes ordered by increasing x (the measurement points).
    pub fn gamma_n_nodes(&self) -> Vec<usize> {
        (0..=self.nx).map(|ix| self.node_index(ix, self.ny)).collect()
    }

    /// Bottom-contact nodes ordered by increasing x.
    pub fn gamma_p_nodes(&self) -> Vec<usize> {
        (0..=self.nx).map(|ix| self.node_index(ix, 0)).collect()
    }

    /// All Dirichlet (contact) nodes: bottom row then top row.
    pub fn contact_nodes(&self) -> Vec<usize> {
        let mut v = self.gamma_p_nodes();
        v.extend(self.gamma_n_nodes());
        v
    }

    /// 16-hex-char digest of (nx, ny, node coordinates); keys exported fields
    /// to the mesh they live on.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}
