//! Point cloud and mask files, and the on-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<class>/train/<stem>.xyz     normal clouds only
//! <root>/<class>/test/<stem>.xyz      normal and anomalous clouds
//! <root>/<class>/gt/<stem>.txt        one 0/1 per point; absent = all normal
//! ```
//!
//! Clouds are read from ASCII XYZ (`x y z` per line) or ASCII PLY with
//! `x, y, z` and optional `nx, ny, nz` vertex properties.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `bytes` to a temporary sibling, syncs it and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_floats(path: &Path, line_no: usize, line: &str, want: usize) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(path, line_no, format!("`{t}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() < want {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {want} values, found {}", vals.len()),
        ));
    }
    Ok(vals)
}

fn parse_xyz(path: &Path, text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_floats(path, i + 1, line, 3)?;
        if v.len() != 3 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected 3 values, found {}", v.len()),
            ));
        }
        pts.push(Vec3::new(v[0], v[1], v[2]));
    }
    if pts.is_empty() {
        return Err(data_err(path, "file contains no points"));
    }
    PointCloud::new(pts).map_err(|e| data_err(path, e.to_string()))
}

fn parse_ply(path: &Path, text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    let mut vertex_count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | [] => {}
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(parse_err(
                        path,
                        i + 1,
                        format!("unsupported PLY format `{fmt}`"),
                    ));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count.parse::<usize>().map_err(|_| {
                        parse_err(path, i + 1, format!("bad vertex count `{count}`"))
                    })?);
                }
            }
            ["property", .., name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("unexpected header line `{line}`"),
                ))
            }
        }
    }
    if !header_done {
        return Err(data_err(path, "PLY header has no end_header"));
    }
    let count = vertex_count.ok_or_else(|| data_err(path, "PLY has no vertex element"))?;
    let col = |n: &str| props.iter().position(|p| p == n);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(data_err(path, "PLY vertices need x, y and z properties")),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut pts = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for (i, line) in lines.take(count) {
        let v = parse_floats(path, i + 1, line, props.len())?;
        pts.push(Vec3::new(v[x], v[y], v[z]));
        if let Some((a, b, c)) = normal_cols {
            normals.push(Vec3::new(v[a], v[b], v[c]));
        }
    }
    if pts.len() != count {
        return Err(data_err(
            path,
            format!("header declares {count} vertices, file has {}", pts.len()),
        ));
    }
    if pts.is_empty() {
        return Err(data_err(path, "file contains no points"));
    }
    let cloud = PointCloud::new(pts).map_err(|e| data_err(path, e.to_string()))?;
    if normal_cols.is_some() {
        // Stored normals are rounded; renormalize before the unit-length check.
        let normals = normals
            .into_iter()
            .map(|n| {
                let l = n.norm();
                if l > 0.0 {
                    n / l
                } else {
                    n
                }
            })
            .collect();
        cloud
            .with_normals(normals)
            .map_err(|e| data_err(path, e.to_string()))
    } else {
        Ok(cloud)
    }
}

/// Reads an `.xyz` or `.ply` cloud, preserving point order.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(data_err(path, "file is empty"));
    }
    let is_ply = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
        || text.starts_with("ply");
    if is_ply {
        parse_ply(path, &text)
    } else {
        parse_xyz(path, &text)
    }
}

/// `x y z` per line with round-trip float formatting.
pub fn xyz_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 40);
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, xyz_string(cloud).as_bytes())
}

/// ASCII PLY with normals when present and optional 8-bit vertex colors.
pub fn ply_string(cloud: &PointCloud, colors: Option<&[[u8; 3]]>) -> Result<String> {
    if let Some(c) = colors {
        if c.len() != cloud.len() {
            return Err(Error::ShapeMismatch {
                context: "vertex colors",
                expected: cloud.len(),
                found: c.len(),
            });
        }
    }
    let mut s = String::with_capacity(cloud.len() * 60 + 200);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let normals = cloud.normals();
    if normals.is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(n) = normals {
            let _ = write!(s, " {} {} {}", n[i].x, n[i].y, n[i].z);
        }
        if let Some(c) = colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_ply(path: &Path, cloud: &PointCloud, colors: Option<&[[u8; 3]]>) -> Result<()> {
    write_atomic(path, ply_string(cloud, colors)?.as_bytes())
}

/// Reads one 0/1 flag per line and checks the count against `expected_n`.
pub fn load_mask(path: &Path, expected_n: usize) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut mask = Vec::with_capacity(expected_n);
    for (i, line) in text.lines().enumerate() {
        match line.trim() {
            "" => continue,
            "0" => mask.push(0),
            "1" => mask.push(1),
            t => {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("mask value `{t}` is not 0 or 1"),
                ))
            }
        }
    }
    if mask.len() != expected_n {
        return Err(data_err(
            path,
            format!(
                "mask has {} entries but the cloud has {expected_n} points",
                mask.len()
            ),
        ));
    }
    Ok(mask)
}

pub fn mask_string(mask: &[u8]) -> String {
    let mut s = String::with_capacity(mask.len() * 2);
    for &m in mask {
        s.push(if m != 0 { '1' } else { '0' });
        s.push('\n');
    }
    s
}

pub fn write_mask(path: &Path, mask: &[u8]) -> Result<()> {
    write_atomic(path, mask_string(mask).as_bytes())
}

fn cloud_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
        if p.is_file() && (ext.eq_ignore_ascii_case("xyz") || ext.eq_ignore_ascii_case("ply")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// A test file and its optional ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestEntry {
    pub stem: String,
    pub cloud: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub name: String,
    pub train: Vec<PathBuf>,
    pub test: Vec<TestEntry>,
}

/// Files of a dataset directory, classes and files sorted by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
}

impl DatasetLayout {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(data_err(root, "dataset directory does not exist"));
        }
        let mut class_dirs = Vec::new();
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let p = entry.map_err(|e| Error::io(root, e))?.path();
            if p.is_dir() {
                class_dirs.push(p);
            }
        }
        class_dirs.sort();
        let mut classes = Vec::new();
        for dir in class_dirs {
            let train_dir = dir.join("train");
            let test_dir = dir.join("test");
            if !train_dir.is_dir() && !test_dir.is_dir() {
                continue;
            }
            let train = if train_dir.is_dir() {
                cloud_files(&train_dir)?
            } else {
                Vec::new()
            };
            let test = if test_dir.is_dir() {
                cloud_files(&test_dir)?
                    .into_iter()
                    .map(|cloud| {
                        let s = stem(&cloud);
                        let m = dir.join("gt").join(format!("{s}.txt"));
                        TestEntry {
                            stem: s,
                            cloud,
                            mask: m.is_file().then_some(m),
                        }
                    })
                    .collect()
            } else {
                Vec::new()
            };
            classes.push(ClassEntry {
                name: stem(&dir),
                train,
                test,
            });
        }
        if classes.is_empty() {
            return Err(data_err(
                root,
                "no class directories with train/ or test/ found",
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            classes,
        })
    }

    pub fn train_files(&self) -> Vec<&Path> {
        self.classes
            .iter()
            .flat_map(|c| c.train.iter().map(PathBuf::as_path))
            .collect()
    }
}

/// Loads a test cloud with its mask; a missing mask means all-normal.
pub fn load_test_sample(entry: &TestEntry) -> Result<(PointCloud, Vec<u8>)> {
    let cloud = load_cloud(&entry.cloud)?;
    let mask = match &entry.mask {
        Some(m) => load_mask(m, cloud.len())?,
        None => vec![0; cloud.len()],
    };
    Ok((cloud, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn xyz_two_points() {
        let d = tmp();
        let p = d.path().join("a.xyz");
        fs::write(&p, "0 0 0\n1 0 0\n").unwrap();
        let c = load_cloud(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points()[1], Vec3::x());
    }

    #[test]
    fn xyz_errors_name_the_line() {
        let d = tmp();
        let p = d.path().join("a.xyz");
        fs::write(&p, "0 0 0\n1 zero 0\n").unwrap();
        match load_cloud(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&p, "").unwrap();
        assert!(matches!(load_cloud(&p), Err(Error::Data { .. })));
    }

    #[test]
    fn ply_with_normals() {
        let d = tmp();
        let p = d.path().join("a.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n\
             property float z\nproperty float nx\nproperty float ny\nproperty float nz\n\
             end_header\n0 0 0 0 0 1\n1 2 3 1 0 0\n",
        )
        .unwrap();
        let c = load_cloud(&p).unwrap();
        assert_eq!(c.normals().unwrap(), &[Vec3::z(), Vec3::x()]);
        assert_eq!(c.points()[1], Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn write_read_roundtrip_both_formats() {
        let d = tmp();
        let pts = vec![
            Vec3::new(0.1, -2.5e-3, 7.0),
            Vec3::new(1.0 / 3.0, 0.0, -1.0),
        ];
        let c = PointCloud::new(pts)
            .unwrap()
            .with_normals(vec![Vec3::y(), Vec3::z()])
            .unwrap();
        let a = d.path().join("c.xyz");
        write_xyz(&a, &c).unwrap();
        assert_eq!(load_cloud(&a).unwrap().points(), c.points());
        let b = d.path().join("c.ply");
        write_ply(&b, &c, Some(&[[255, 0, 0], [0, 0, 255]])).unwrap();
        let back = load_cloud(&b).unwrap();
        assert_eq!(back.points(), c.points());
        assert_eq!(back.normals(), c.normals());
    }

    #[test]
    fn masks() {
        let d = tmp();
        let p = d.path().join("m.txt");
        fs::write(&p, "0\n1\n0\n").unwrap();
        assert_eq!(load_mask(&p, 3).unwrap(), vec![0, 1, 0]);
        let err = load_mask(&p, 2).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('2'), "{err}");
        fs::write(&p, "0\n2\n").unwrap();
        assert!(load_mask(&p, 2).is_err());
    }
}
