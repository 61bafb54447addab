//! File formats for every artifact the pipelines emit: node-keyed field
//! CSVs guarded by a mesh-hash header, mesh dumps, observation files, chain
//! traces, doping tables, plot grids, JSON records, the output manifest, and
//! a binary eigenpair cache.
//!
//! All floating-point output uses 17 significant digits, enough to
//! round-trip any f64 exactly, so identical runs produce byte-identical
//! numeric files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{FieldRole, ScalarField};
use crate::forward::Observation;
use crate::mesh::{BoundaryTag, Mesh};
use crate::prior::KlBasis;

/// 17 significant digits: the shortest width that reproduces every f64 bit
/// pattern on read-back.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn file_error(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Domain(format!("{}: {what}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// `node_id,value` rows under a mesh-hash header line.
pub fn write_field_csv(path: &Path, mesh: &Mesh, field: &ScalarField) -> Result<()> {
    field.check_mesh(mesh)?;
    let mut w = create(path)?;
    writeln!(w, "# mesh_hash={}", mesh.hash())?;
    writeln!(w, "node_id,value")?;
    for (i, v) in field.values().iter().enumerate() {
        writeln!(w, "{i},{}", fmt_f64(*v))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a field CSV back, refusing hashes from a different mesh.
pub fn read_field_csv(path: &Path, mesh: &Mesh, role: FieldRole) -> Result<ScalarField> {
    let text = fs::read_to_string(path)
        .map_err(|e| file_error(path, format_args!("cannot read: {e}")))?;
    let mut lines = text.lines();
    let hash_line = lines
        .next()
        .ok_or_else(|| file_error(path, "empty field file"))?;
    let hash = hash_line
        .strip_prefix("# mesh_hash=")
        .ok_or_else(|| file_error(path, "missing mesh_hash header"))?;
    if hash != mesh.hash() {
        return Err(file_error(
            path,
            format_args!("mesh hash {hash} does not match mesh {}", mesh.hash()),
        ));
    }
    let header = lines.next();
    if header != Some("node_id,value") {
        return Err(file_error(path, "missing node_id,value header"));
    }
    let mut values = vec![f64::NAN; mesh.num_nodes()];
    let mut seen = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (id, value) = line
            .split_once(',')
            .ok_or_else(|| file_error(path, format_args!("bad row '{line}'")))?;
        let id: usize = id
            .parse()
            .map_err(|e| file_error(path, format_args!("bad node id '{id}': {e}")))?;
        if id >= values.len() {
            return Err(file_error(path, format_args!("node id {id} out of range")));
        }
        values[id] = value
            .parse()
            .map_err(|e| file_error(path, format_args!("bad value '{value}': {e}")))?;
        seen += 1;
    }
    if seen != values.len() || values.iter().any(|v| v.is_nan()) {
        return Err(file_error(
            path,
            format_args!("expected {} distinct node rows, got {seen}", values.len()),
        ));
    }
    ScalarField::new(mesh, values, role)
}

/// Two CSVs: `<stem>_nodes.csv` with `node_id,x,y,tag,region` and
/// `<stem>_triangles.csv` with `tri_id,n0,n1,n2`.
pub fn write_mesh_csv(dir: &Path, stem: &str, mesh: &Mesh) -> Result<(PathBuf, PathBuf)> {
    let nodes_path = dir.join(format!("{stem}_nodes.csv"));
    let mut w = create(&nodes_path)?;
    writeln!(w, "# mesh_hash={}", mesh.hash())?;
    writeln!(w, "node_id,x,y,tag,region")?;
    for i in 0..mesh.num_nodes() {
        let [x, y] = mesh.node(i);
        writeln!(
            w,
            "{i},{},{},{},{}",
            fmt_f64(x),
            fmt_f64(y),
            mesh.node_tag(i).as_str(),
            mesh.node_region(i).as_str()
        )?;
    }
    w.flush()?;

    let tris_path = dir.join(format!("{stem}_triangles.csv"));
    let mut w = create(&tris_path)?;
    writeln!(w, "# mesh_hash={}", mesh.hash())?;
    writeln!(w, "tri_id,n0,n1,n2")?;
    for t in 0..mesh.num_triangles() {
        let [a, b, c] = mesh.triangle(t);
        writeln!(w, "{t},{a},{b},{c}")?;
    }
    w.flush()?;
    Ok((nodes_path, tris_path))
}

/// Observation rows `obs_id,node_id,y,noiseless` under mesh-hash and noise
/// headers. A missing noiseless column is written as the noisy value.
pub fn write_observation_csv(path: &Path, mesh: &Mesh, obs: &Observation) -> Result<()> {
    obs.validate()?;
    let mut w = create(path)?;
    writeln!(w, "# mesh_hash={}", mesh.hash())?;
    writeln!(w, "# sigma_n2={}", fmt_f64(obs.sigma_n2))?;
    writeln!(w, "obs_id,node_id,y,noiseless")?;
    for (k, (&node, &y)) in obs.points.iter().zip(&obs.values).enumerate() {
        let clean = obs.noiseless.as_ref().map_or(y, |g| g[k]);
        writeln!(w, "{k},{node},{},{}", fmt_f64(y), fmt_f64(clean))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_observation_csv(path: &Path, mesh: &Mesh) -> Result<Observation> {
    let text = fs::read_to_string(path)
        .map_err(|e| file_error(path, format_args!("cannot read: {e}")))?;
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# mesh_hash="))
        .ok_or_else(|| file_error(path, "missing mesh_hash header"))?;
    if hash != mesh.hash() {
        return Err(file_error(
            path,
            format_args!("mesh hash {hash} does not match mesh {}", mesh.hash()),
        ));
    }
    let sigma_n2: f64 = lines
        .next()
        .and_then(|l| l.strip_prefix("# sigma_n2="))
        .ok_or_else(|| file_error(path, "missing sigma_n2 header"))?
        .parse()
        .map_err(|e| file_error(path, format_args!("bad sigma_n2: {e}")))?;
    if lines.next() != Some("obs_id,node_id,y,noiseless") {
        return Err(file_error(path, "missing observation column header"));
    }
    let mut points = Vec::new();
    let mut values = Vec::new();
    let mut noiseless = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(file_error(path, format_args!("bad row '{line}'")));
        }
        let node: usize = cols[1]
            .parse()
            .map_err(|e| file_error(path, format_args!("bad node id '{}': {e}", cols[1])))?;
        if node >= mesh.num_nodes() || mesh.node_tag(node) != BoundaryTag::GammaN {
            return Err(file_error(
                path,
                format_args!("observation node {node} is not on the top contact"),
            ));
        }
        points.push(node);
        values.push(
            cols[2]
                .parse()
                .map_err(|e| file_error(path, format_args!("bad value '{}': {e}", cols[2])))?,
        );
        noiseless.push(
            cols[3]
                .parse()
                .map_err(|e| file_error(path, format_args!("bad value '{}': {e}", cols[3])))?,
        );
    }
    let expected = mesh.gamma_n_nodes().len();
    if points.len() != expected {
        return Err(file_error(
            path,
            format_args!("expected {expected} observation rows, got {}", points.len()),
        ));
    }
    let obs = Observation {
        values,
        points,
        sigma_n2,
        noiseless: Some(noiseless),
    };
    obs.validate()?;
    Ok(obs)
}

/// `iter,value` rows for one traced node.
pub fn write_trace_csv(path: &Path, iters: &[usize], values: &[f64]) -> Result<()> {
    if iters.len() != values.len() {
        return Err(Error::Domain(format!(
            "trace has {} iterations for {} values",
            iters.len(),
            values.len()
        )));
    }
    let mut w = create(path)?;
    writeln!(w, "iter,value")?;
    for (i, v) in iters.iter().zip(values) {
        writeln!(w, "{i},{}", fmt_f64(*v))?;
    }
    w.flush()?;
    Ok(())
}

/// `node_id,x,y,C_reconstructed,C_true,abs_error` rows.
pub fn write_doping_csv(
    path: &Path,
    mesh: &Mesh,
    c_rec: &ScalarField,
    c_true: &ScalarField,
) -> Result<()> {
    c_rec.check_mesh(mesh)?;
    c_rec.check_same_mesh(c_true)?;
    let mut w = create(path)?;
    writeln!(w, "# mesh_hash={}", mesh.hash())?;
    writeln!(w, "node_id,x,y,C_reconstructed,C_true,abs_error")?;
    for i in 0..mesh.num_nodes() {
        let [x, y] = mesh.node(i);
        let r = c_rec.get(i);
        let t = c_true.get(i);
        writeln!(
            w,
            "{i},{},{},{},{},{}",
            fmt_f64(x),
            fmt_f64(y),
            fmt_f64(r),
            fmt_f64(t),
            fmt_f64((r - t).abs())
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `x,y,value` triples for surface plotting, node order.
pub fn write_grid_csv(path: &Path, mesh: &Mesh, field: &ScalarField) -> Result<()> {
    field.check_mesh(mesh)?;
    let mut w = create(path)?;
    writeln!(w, "x,y,value")?;
    for i in 0..mesh.num_nodes() {
        let [x, y] = mesh.node(i);
        writeln!(w, "{},{},{}", fmt_f64(x), fmt_f64(y), fmt_f64(field.get(i)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Domain(format!("cannot serialize {}: {e}", path.display())))?;
    writeln!(w, "{text}")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| file_error(path, format_args!("cannot read: {e}")))?;
    serde_json::from_str(&text).map_err(|e| file_error(path, format_args!("bad JSON: {e}")))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            walk_files(root, &path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` (except the manifest itself) and writes
/// `manifest.json` with relative paths, sorted.
pub fn write_manifest(dir: &Path) -> Result<PathBuf> {
    let mut paths = Vec::new();
    walk_files(dir, dir, &mut paths)?;
    let mut entries = Vec::new();
    for path in paths {
        let rel = path
            .strip_prefix(dir)
            .map_err(|_| file_error(&path, "escapes the output directory"))?
            .to_string_lossy()
            .replace('\\', "/");
        if rel == MANIFEST_NAME {
            continue;
        }
        let data = fs::read(&path)?;
        let mut hasher = Sha256::new();
        hasher.update(&data);
        let digest = hasher.finalize();
        let sha256: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        entries.push(ManifestEntry {
            path: rel,
            bytes: data.len() as u64,
            sha256,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest_path = dir.join(MANIFEST_NAME);
    write_json(&manifest_path, &Manifest { files: entries })?;
    Ok(manifest_path)
}

const KL_CACHE_MAGIC: &[u8; 8] = b"DOPINVKL";
const KL_CACHE_VERSION: u32 = 1;

/// Cache key: the decomposition is valid only for one mesh and one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KlCacheKey {
    pub mesh_hash: String,
    pub sigma2: f64,
    pub nu: f64,
    pub ell: f64,
    pub n_kl: usize,
}

/// Binary dump of the truncated eigendecomposition. Layout, little-endian:
/// magic, version, key (hash bytes, three f64, n_kl), dim, clipped count,
/// eigenvalues, then modes column-major.
pub fn write_kl_cache(path: &Path, key: &KlCacheKey, basis: &KlBasis) -> Result<()> {
    if key.n_kl != basis.n_kl() {
        return Err(Error::Domain(format!(
            "cache key says {} modes but basis holds {}",
            key.n_kl,
            basis.n_kl()
        )));
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(KL_CACHE_MAGIC);
    buf.extend_from_slice(&KL_CACHE_VERSION.to_le_bytes());
    let hash = key.mesh_hash.as_bytes();
    buf.extend_from_slice(&(hash.len() as u64).to_le_bytes());
    buf.extend_from_slice(hash);
    buf.extend_from_slice(&key.sigma2.to_le_bytes());
    buf.extend_from_slice(&key.nu.to_le_bytes());
    buf.extend_from_slice(&key.ell.to_le_bytes());
    buf.extend_from_slice(&(key.n_kl as u64).to_le_bytes());
    buf.extend_from_slice(&(basis.dim() as u64).to_le_bytes());
    buf.extend_from_slice(&(basis.clipped() as u64).to_le_bytes());
    for &l in basis.eigenvalues() {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for col in 0..basis.n_kl() {
        for row in 0..basis.dim() {
            buf.extend_from_slice(&basis.modes()[(row, col)].to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        if end > self.data.len() {
            return None;
        }
        let slice = &self.data[self.pos..end];
        self.pos = end;
        Some(slice)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Loads a cached decomposition if the file exists and its key matches
/// exactly (bit-level for the floats). Any mismatch or corruption reads as
/// a miss, never an error: the cache is advisory.
pub fn read_kl_cache(path: &Path, key: &KlCacheKey) -> Option<KlBasis> {
    let data = fs::read(path).ok()?;
    let mut r = ByteReader { data: &data, pos: 0 };
    if r.take(8)? != KL_CACHE_MAGIC || r.u32()? != KL_CACHE_VERSION {
        log::warn!("ignoring cache {}: wrong magic or version", path.display());
        return None;
    }
    let hash_len = r.u64()? as usize;
    let hash = std::str::from_utf8(r.take(hash_len)?).ok()?;
    let sigma2 = r.f64()?;
    let nu = r.f64()?;
    let ell = r.f64()?;
    let n_kl = r.u64()? as usize;
    if hash != key.mesh_hash
        || sigma2.to_bits() != key.sigma2.to_bits()
        || nu.to_bits() != key.nu.to_bits()
        || ell.to_bits() != key.ell.to_bits()
        || n_kl != key.n_kl
    {
        return None;
    }
    let dim = r.u64()? as usize;
    let clipped = r.u64()? as usize;
    let mut eigenvalues = Vec::with_capacity(n_kl);
    for _ in 0..n_kl {
        eigenvalues.push(r.f64()?);
    }
    let mut modes = DMatrix::zeros(dim, n_kl);
    for col in 0..n_kl {
        for row in 0..dim {
            modes[(row, col)] = r.f64()?;
        }
    }
    if r.pos != data.len() {
        log::warn!("ignoring cache {}: trailing bytes", path.display());
        return None;
    }
    match KlBasis::from_parts(eigenvalues, modes, clipped) {
        Ok(basis) => Some(basis),
        Err(e) => {
            log::warn!("ignoring cache {}: {e}", path.display());
            None
        }
    }
}
