//! Long-format CSV ingestion.
//!
//! One row per observation. Required columns: `group_id` and `y`. Fixed-effect
//! covariates are the columns whose name starts with `x`; the columns of the
//! `j`-th random-effect design are named `z{j}_<anything>`, with `j` running
//! contiguously from 1. Rows of a group are taken in file order; groups are
//! ordered by first appearance.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use mdpde_core::{GroupBlock, GroupedDesign};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("header: {0}")]
    Header(String),
    #[error("row {row}, column '{column}': {message}")]
    Cell { row: usize, column: String, message: String },
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("{0}")]
    Design(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Role {
    Group,
    Response,
    Fixed,
    Random(usize),
}

#[derive(Debug, Clone)]
struct Layout {
    roles: Vec<Role>,
    names: Vec<String>,
    n_random: usize,
}

fn parse_header(names: &[String]) -> Result<Layout, DataError> {
    let mut roles = Vec::with_capacity(names.len());
    for name in names {
        let role = match name.as_str() {
            "group_id" => Role::Group,
            "y" => Role::Response,
            n if n.starts_with('z') => {
                let (idx, rest) = n[1..].split_once('_').ok_or_else(|| {
                    DataError::Header(format!("column '{n}': random-design columns are named z<j>_<label>"))
                })?;
                let j: usize = idx
                    .parse()
                    .ok()
                    .filter(|j| *j >= 1)
                    .ok_or_else(|| DataError::Header(format!("column '{n}': factor index must be a positive integer")))?;
                if rest.is_empty() {
                    return Err(DataError::Header(format!("column '{n}': empty label after the factor index")));
                }
                Role::Random(j)
            }
            n if n.starts_with('x') => Role::Fixed,
            n => return Err(DataError::Header(format!("unrecognised column '{n}'"))),
        };
        roles.push(role);
    }
    for (role, label) in [(Role::Group, "group_id"), (Role::Response, "y")] {
        match roles.iter().filter(|r| **r == role).count() {
            1 => {}
            0 => return Err(DataError::Header(format!("missing column '{label}'"))),
            _ => return Err(DataError::Header(format!("column '{label}' appears more than once"))),
        }
    }
    if !roles.contains(&Role::Fixed) {
        return Err(DataError::Header("no fixed-effect columns (x...)".into()));
    }
    let n_random = roles
        .iter()
        .filter_map(|r| match r {
            Role::Random(j) => Some(*j),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    for j in 1..=n_random {
        if !roles.contains(&Role::Random(j)) {
            return Err(DataError::Header(format!(
                "random factors must be numbered contiguously from 1; z{j}_* is missing"
            )));
        }
    }
    Ok(Layout {
        roles,
        names: names.to_vec(),
        n_random,
    })
}

#[derive(Default)]
struct GroupRows {
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<Vec<f64>>>,
}

/// Reads a long-format dataset from any reader. Row numbers in diagnostics
/// count the header as row 1.
pub fn read_design<R: Read>(reader: R) -> Result<(GroupedDesign, Vec<String>), DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Header(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.iter().all(String::is_empty) {
        return Err(DataError::Header("file is empty".into()));
    }
    let layout = parse_header(&header)?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, GroupRows> = HashMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 2;
        let record = record.map_err(|e| DataError::Row { row, message: e.to_string() })?;
        if record.len() != layout.roles.len() {
            return Err(DataError::Row {
                row,
                message: format!("expected {} fields, found {}", layout.roles.len(), record.len()),
            });
        }
        let mut gid = String::new();
        let mut y = 0.0;
        let mut x = Vec::new();
        let mut z = vec![Vec::new(); layout.n_random];
        for (c, field) in record.iter().enumerate() {
            let number = || {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::Cell {
                        row,
                        column: layout.names[c].clone(),
                        message: format!("'{field}' is not a finite number"),
                    })
            };
            match layout.roles[c] {
                Role::Group => {
                    if field.is_empty() {
                        return Err(DataError::Cell {
                            row,
                            column: layout.names[c].clone(),
                            message: "empty group id".into(),
                        });
                    }
                    gid = field.to_owned();
                }
                Role::Response => y = number()?,
                Role::Fixed => x.push(number()?),
                Role::Random(j) => z[j - 1].push(number()?),
            }
        }
        let entry = groups.entry(gid.clone()).or_insert_with(|| {
            order.push(gid);
            GroupRows::default()
        });
        entry.y.push(y);
        entry.x.push(x);
        entry.z.push(z);
    }
    if order.is_empty() {
        return Err(DataError::Design("no data rows".into()));
    }

    let blocks = order
        .iter()
        .map(|gid| {
            let g = &groups[gid];
            let n = g.y.len();
            let k = g.x[0].len();
            let x = DMatrix::from_fn(n, k, |a, b| g.x[a][b]);
            let z = (0..layout.n_random)
                .map(|j| {
                    let q = g.z[0][j].len();
                    DMatrix::from_fn(n, q, |a, b| g.z[a][j][b])
                })
                .collect();
            GroupBlock::new(DVector::from_vec(g.y.clone()), x, z).map_err(|e| DataError::Design(format!("group '{gid}': {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let design = GroupedDesign::new(blocks).map_err(|e| DataError::Design(e.to_string()))?;
    Ok((design, order))
}

/// Reads a long-format dataset from a file path.
pub fn load_design(path: &Path) -> Result<(GroupedDesign, Vec<String>), DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_design(file)
}

/// Writes a design in the long format read by [`read_design`].
pub fn write_design<W: std::io::Write>(design: &GroupedDesign, ids: &[String], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["group_id".to_owned(), "y".to_owned()];
    header.extend((1..=design.k()).map(|c| format!("x{c}")));
    if let Some(g) = design.groups().first() {
        for (j, zj) in g.z().iter().enumerate() {
            header.extend((1..=zj.ncols()).map(|c| format!("z{}_{c}", j + 1)));
        }
    }
    w.write_record(&header)?;
    for (g, id) in design.groups().iter().zip(ids) {
        for row in 0..g.len() {
            let mut rec = vec![id.clone(), crate::output::num(g.y()[row])];
            rec.extend(g.x().row(row).iter().map(|v| crate::output::num(*v)));
            for zj in g.z() {
                rec.extend(zj.row(row).iter().map(|v| crate::output::num(*v)));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
