//! File formats.
//!
//! * OCGR: `"OCGR"`, u32 version (1), u32 D, H, W, C, then D·H·W 10-byte tree
//!   records in row-major tree order, then the data array as f32. All
//!   integers and floats are little-endian.
//! * DTEN: `"DTEN"`, u32 C, X, Y, Z, then the f32 payload in `(c, x, y, z)`
//!   row-major order.
//! * OFF triangle meshes (ASCII) and XYZ point files (ASCII, one point per
//!   line: `x y z [f1 .. fF] [label]`).

use std::io::{BufRead, Read, Write};

use crate::builder::{PointSet, TriangleMesh, Vec3};
use crate::dense::DenseTensor;
use crate::error::{Error, Result};
use crate::grid::{GridOctree, Structure};
use crate::tree::{TreeBits, TREE_BYTES};

pub const OCGR_MAGIC: &[u8; 4] = b"OCGR";
pub const OCGR_VERSION: u32 = 1;
/// Magic, version and four dimensions.
pub const OCGR_HEADER_BYTES: usize = 24;
pub const DTEN_MAGIC: &[u8; 4] = b"DTEN";
pub const DTEN_HEADER_BYTES: usize = 20;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Corrupt("file too short for a header".into()))?;
    if &b != magic {
        return Err(Error::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Corrupt(format!("payload shorter than {n} floats")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes", rest.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_ocgr(w: &mut impl Write, grid: &GridOctree) -> Result<()> {
    let [d, h, wd] = grid.dims();
    w.write_all(OCGR_MAGIC)?;
    for v in [OCGR_VERSION, d as u32, h as u32, wd as u32, grid.channels() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut trees = Vec::with_capacity(grid.structure().tree_count() * TREE_BYTES);
    for t in grid.structure().trees() {
        trees.extend_from_slice(&t.to_bytes());
    }
    w.write_all(&trees)?;
    write_f32s(w, grid.data())
}

pub fn read_ocgr(r: &mut impl Read) -> Result<GridOctree> {
    read_magic(r, OCGR_MAGIC)?;
    let version = read_u32(r)?;
    if version != OCGR_VERSION {
        return Err(Error::Corrupt(format!("unsupported OCGR version {version}")));
    }
    let dims = [read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize];
    let channels = read_u32(r)? as usize;
    if dims.contains(&0) || channels == 0 {
        return Err(Error::Corrupt(format!("invalid dims {dims:?} / channels {channels}")));
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or_else(|| Error::Corrupt("tree count overflows".into()))?;
    let mut trees = Vec::with_capacity(n);
    let mut rec = [0u8; TREE_BYTES];
    for t in 0..n {
        r.read_exact(&mut rec)
            .map_err(|_| Error::Corrupt(format!("truncated tree record {t}")))?;
        trees.push(
            TreeBits::from_bytes(&rec).map_err(|e| Error::Corrupt(format!("tree {t}: {e}")))?,
        );
    }
    let structure = Structure::new(dims, trees)?;
    let values = structure.num_leaves() * channels;
    let data = read_f32s(r, values)?;
    GridOctree::new(structure, channels, data)
}

/// Exact size in bytes of a grid's OCGR encoding.
pub fn ocgr_size(grid: &GridOctree) -> usize {
    OCGR_HEADER_BYTES + grid.structure().tree_count() * TREE_BYTES + 4 * grid.value_count()
}

pub fn write_dten(w: &mut impl Write, t: &DenseTensor) -> Result<()> {
    let [x, y, z] = t.shape();
    w.write_all(DTEN_MAGIC)?;
    for v in [t.channels() as u32, x as u32, y as u32, z as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    write_f32s(w, t.data())
}

pub fn read_dten(r: &mut impl Read) -> Result<DenseTensor> {
    read_magic(r, DTEN_MAGIC)?;
    let c = read_u32(r)? as usize;
    let shape = [read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize];
    let n = c * shape[0] * shape[1] * shape[2];
    let data = read_f32s(r, n)?;
    DenseTensor::from_vec(c, shape, data).map_err(|e| Error::Corrupt(e.to_string()))
}

/// Lines with comments and blanks removed, paired with 1-based line numbers.
fn content_lines(r: impl BufRead) -> impl Iterator<Item = Result<(usize, String)>> {
    r.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(Error::Io(e))),
        Ok(l) => {
            let body = l.split('#').next().unwrap_or("").trim().to_string();
            (!body.is_empty()).then_some(Ok((i + 1, body)))
        }
    })
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse `{tok}`"),
    })
}

/// Reads an ASCII OFF mesh. Only triangular faces are accepted.
pub fn read_off(r: impl BufRead) -> Result<TriangleMesh> {
    let mut lines = content_lines(r);
    let (line_no, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })??;
    let rest = header.strip_prefix("OFF").ok_or(Error::Parse {
        line: line_no,
        msg: "missing OFF header".into(),
    })?;
    let counts_line = if rest.trim().is_empty() {
        lines.next().ok_or(Error::Parse {
            line: line_no + 1,
            msg: "missing counts line".into(),
        })??
    } else {
        (line_no, rest.trim().to_string())
    };
    let counts: Vec<usize> = counts_line
        .1
        .split_whitespace()
        .map(|t| parse_num(t, counts_line.0))
        .collect::<Result<_>>()?;
    if counts.len() < 2 {
        return Err(Error::Parse {
            line: counts_line.0,
            msg: "expected vertex and face counts".into(),
        });
    }
    let (nv, nf) = (counts[0], counts[1]);
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: "unexpected end of file in vertex list".into(),
        })??;
        let xs: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|t| parse_num(t, ln))
            .collect::<Result<_>>()?;
        if xs.len() != 3 {
            return Err(Error::Parse {
                line: ln,
                msg: "vertex needs three coordinates".into(),
            });
        }
        vertices.push([xs[0], xs[1], xs[2]]);
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: "unexpected end of file in face list".into(),
        })??;
        let idx: Vec<usize> = l
            .split_whitespace()
            .map(|t| parse_num(t, ln))
            .collect::<Result<_>>()?;
        if idx.first() != Some(&3) || idx.len() < 4 {
            return Err(Error::Parse {
                line: ln,
                msg: "only triangular faces are supported".into(),
            });
        }
        triangles.push([idx[1], idx[2], idx[3]]);
    }
    TriangleMesh::new(vertices, triangles)
}

/// Reads an XYZ point file. With `labelled`, the last column is an integer
/// class id. Without feature columns every point gets an occupancy feature of 1.
pub fn read_xyz(r: impl BufRead, labelled: bool) -> Result<PointSet> {
    let mut points: Vec<Vec3> = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for line in content_lines(r) {
        let (ln, l) = line?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let min = if labelled { 4 } else { 3 };
        if toks.len() < min {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected at least {min} columns, got {}", toks.len()),
            });
        }
        match width {
            None => width = Some(toks.len()),
            Some(w) if w != toks.len() => {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("expected {w} columns, got {}", toks.len()),
                })
            }
            _ => {}
        }
        points.push([
            parse_num(toks[0], ln)?,
            parse_num(toks[1], ln)?,
            parse_num(toks[2], ln)?,
        ]);
        let feat_end = if labelled { toks.len() - 1 } else { toks.len() };
        for t in &toks[3..feat_end] {
            features.push(parse_num::<f32>(t, ln)?);
        }
        if labelled {
            labels.push(parse_num::<u32>(toks[toks.len() - 1], ln)?);
        }
    }
    let feature_len = width.map_or(0, |w| w - 3 - labelled as usize);
    let labels = labelled.then_some(labels);
    if feature_len == 0 {
        let n = points.len();
        PointSet::new(points, 1, vec![1.0; n], labels)
    } else {
        PointSet::new(points, feature_len, features, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SplitOdds};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ocgr_round_trip_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = synth::random_grid(&mut rng, [2, 3, 1], 2, SplitOdds::default());
        let mut buf = Vec::new();
        write_ocgr(&mut buf, &g).unwrap();
        assert_eq!(buf.len(), ocgr_size(&g));
        assert_eq!(&buf[..4], b"OCGR");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(read_ocgr(&mut buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn ocgr_rejects_corruption() {
        let g = GridOctree::zeros(Structure::full([1, 1, 1]).unwrap(), 1).unwrap();
        let mut buf = Vec::new();
        write_ocgr(&mut buf, &g).unwrap();
        assert!(read_ocgr(&mut &buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_ocgr(&mut extra.as_slice()).is_err());
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_ocgr(&mut bad_magic.as_slice()).is_err());
        let mut orphan = buf.clone();
        orphan[24] = 0; // clear the root bit of the only tree
        assert!(matches!(read_ocgr(&mut orphan.as_slice()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn dten_round_trip() {
        let t = DenseTensor::from_fn(2, [3, 1, 2], |c, i, j, k| (c * 100 + i * 10 + j + k) as f32);
        let mut buf = Vec::new();
        write_dten(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), DTEN_HEADER_BYTES + 4 * 12);
        assert_eq!(read_dten(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn off_parsing() {
        let src = "OFF\n# a comment\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 1 2 3\n";
        let m = read_off(src.as_bytes()).unwrap();
        assert_eq!(m.vertices().len(), 4);
        assert_eq!(m.triangles(), &[[0, 1, 2], [1, 2, 3]]);
        let quad = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        assert!(matches!(read_off(quad.as_bytes()), Err(Error::Parse { .. })));
        assert!(read_off("PLY\n".as_bytes()).is_err());
        let inline = "OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        assert_eq!(read_off(inline.as_bytes()).unwrap().triangles().len(), 1);
    }

    #[test]
    fn xyz_parsing() {
        let p = read_xyz("1 2 3\n4 5 6\n".as_bytes(), false).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.feature_len(), 1);
        assert_eq!(p.feature(1), &[1.0]);

        let p = read_xyz("1 2 3 0.5 0.25 7\n4 5 6 1 2 3\n".as_bytes(), true).unwrap();
        assert_eq!(p.feature_len(), 2);
        assert_eq!(p.feature(0), &[0.5, 0.25]);
        assert_eq!(p.labels().unwrap(), &[7, 3]);

        assert!(read_xyz("1 2 3\n4 5\n".as_bytes(), false).is_err());
        assert!(read_xyz("1 2 3 4\n1 2 3\n".as_bytes(), false).is_err());
        assert!(read_xyz("".as_bytes(), false).unwrap().is_empty());
    }
}
