//! Point cloud file formats.
//!
//! * ASCII PLY with `x y z` float properties and an optional integer
//!   `label` property.
//! * GSPC, a little-endian binary container:
//!
//! ```text
//! magic   4 bytes  "GSPC"
//! count   u32      number of points
//! flags   u32      bit 0: labels present
//! body    count x (f32 x, f32 y, f32 z)
//! labels  count x u16              (only when flag bit 0 is set)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

pub const GSPC_MAGIC: &[u8; 4] = b"GSPC";
const FLAG_LABELS: u32 = 1;

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply_to(cloud, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_ply_to<W: Write>(cloud: &PointCloud, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if cloud.labels.is_some() {
        writeln!(w, "property ushort label")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        // `{:?}` prints the shortest representation that round-trips exactly
        match cloud.label(i) {
            Some(l) => writeln!(w, "{:?} {:?} {:?} {}", p.x, p.y, p.z, l)?,
            None => writeln!(w, "{:?} {:?} {:?}", p.x, p.y, p.z)?,
        }
    }
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        match lines.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(path, e)),
            None => Err(Error::format(path, "unexpected end of file")),
        }
    };

    if next()?.trim() != "ply" {
        return Err(Error::format(path, "missing `ply` magic line"));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::format(path, format!("unsupported PLY format `{fmt}`")));
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::format(path, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::format(path, "vertex element lacks x/y/z")),
    };
    let il = col("label");

    let mut points = Vec::with_capacity(count);
    let mut labels = il.map(|_| Vec::with_capacity(count));
    for row in 0..count {
        let line = next()?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < props.len() {
            return Err(Error::format(path, format!("vertex {row}: expected {} values", props.len())));
        }
        let num = |i: usize| -> Result<f64> {
            vals[i]
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("vertex {row}: bad number `{}`", vals[i])))
        };
        let p = Point3::new(num(ix)?, num(iy)?, num(iz)?);
        if !p.is_finite() {
            return Err(Error::format(path, format!("vertex {row}: non-finite coordinate")));
        }
        points.push(p);
        if let (Some(i), Some(l)) = (il, labels.as_mut()) {
            let v = vals[i]
                .parse::<u16>()
                .map_err(|_| Error::format(path, format!("vertex {row}: bad label")))?;
            l.push(v);
        }
    }
    Ok(PointCloud { points, labels })
}

pub fn write_gspc(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_gspc_to(cloud, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_gspc_to<W: Write>(cloud: &PointCloud, w: &mut W) -> std::io::Result<()> {
    w.write_all(GSPC_MAGIC)?;
    w.write_u32::<LittleEndian>(cloud.len() as u32)?;
    let flags = if cloud.labels.is_some() { FLAG_LABELS } else { 0 };
    w.write_u32::<LittleEndian>(flags)?;
    for p in &cloud.points {
        w.write_f32::<LittleEndian>(p.x as f32)?;
        w.write_f32::<LittleEndian>(p.y as f32)?;
        w.write_f32::<LittleEndian>(p.z as f32)?;
    }
    if let Some(labels) = &cloud.labels {
        for &l in labels {
            w.write_u16::<LittleEndian>(l)?;
        }
    }
    Ok(())
}

pub fn read_gspc(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_gspc_from(&mut BufReader::new(file)).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData | std::io::ErrorKind::UnexpectedEof => Error::format(path, e.to_string()),
        _ => Error::io(path, e),
    })
}

pub fn read_gspc_from<R: Read>(r: &mut R) -> std::io::Result<PointCloud> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GSPC_MAGIC {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "bad GSPC magic"));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let flags = r.read_u32::<LittleEndian>()?;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = r.read_f32::<LittleEndian>()? as f64;
        let y = r.read_f32::<LittleEndian>()? as f64;
        let z = r.read_f32::<LittleEndian>()? as f64;
        points.push(Point3::new(x, y, z));
    }
    let labels = if flags & FLAG_LABELS != 0 {
        let mut l = Vec::with_capacity(count);
        for _ in 0..count {
            l.push(r.read_u16::<LittleEndian>()?);
        }
        Some(l)
    } else {
        None
    };
    Ok(PointCloud { points, labels })
}

/// Reads a cloud, choosing the format from the extension (`.ply` or `.gspc`).
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(path),
        Some("gspc") | Some("bin") => read_gspc(path),
        _ => Err(Error::format(path, "unknown point cloud extension (expected .ply or .gspc)")),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => write_ply(cloud, path),
        Some("gspc") | Some("bin") => write_gspc(cloud, path),
        _ => Err(Error::format(path, "unknown point cloud extension (expected .ply or .gspc)")),
    }
}
