//! Numeric CSV tables with a header row.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{validate_dataset, RawData, Validated};

/// A header plus an all-numeric body. Rows are numbered from 1 after the
/// header in error messages.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub data: DMatrix<f64>,
}

impl Table {
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let k = self
            .column_index(name)
            .ok_or_else(|| Error::Data(format!("no column named '{name}'")))?;
        Ok(self.data.column(k).iter().copied().collect())
    }

    /// The named columns, in the order given.
    pub fn select(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.nrows(), names.len());
        for (j, name) in names.iter().enumerate() {
            let col = self.column(name)?;
            out.set_column(j, &nalgebra::DVector::from_vec(col));
        }
        Ok(out)
    }
}

pub fn parse_table<R: std::io::Read>(reader: R, source: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{source}: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{source}: missing header row")));
    }
    let width = headers.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{source}: row {}: {e}", r + 1)))?;
        if record.len() != width {
            return Err(Error::Data(format!(
                "{source}: row {} has {} fields but the header has {width}",
                r + 1,
                record.len()
            )));
        }
        for (field, name) in record.iter().zip(&headers) {
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "{source}: row {}, column '{name}': cannot parse '{field}' as a number",
                    r + 1
                ))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok(Table {
        headers,
        data: DMatrix::from_row_slice(rows, width, &values),
    })
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_table(std::io::BufReader::new(file), &path.display().to_string())
}

/// A validated data set together with the column names it was read from.
/// Names exclude any intercept that validation injected.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub validated: Validated,
    pub x_names: Vec<String>,
    pub v_mean_names: Vec<String>,
    pub v_var_names: Vec<String>,
}

/// Reads `y` (one column), `x` and the optional mean and variance designs.
/// A missing mean design means intercept only; a missing variance design
/// reuses the mean design.
pub fn load_dataset(
    path_y: &Path,
    path_x: &Path,
    path_v_mean: Option<&Path>,
    path_v_var: Option<&Path>,
) -> Result<LoadedData> {
    let y = read_table(path_y)?;
    if y.headers.len() != 1 {
        return Err(Error::Data(format!(
            "{}: expected one column, found {}",
            path_y.display(),
            y.headers.len()
        )));
    }
    let x = read_table(path_x)?;
    let n = y.nrows();
    let v_mean = match path_v_mean {
        Some(p) => read_table(p)?,
        None => Table {
            headers: Vec::new(),
            data: DMatrix::zeros(n, 0),
        },
    };
    let v_var = path_v_var.map(read_table).transpose()?;
    let v_var_names = v_var
        .as_ref()
        .map(|t| t.headers.clone())
        .unwrap_or_else(|| v_mean.headers.clone());
    let validated = validate_dataset(RawData {
        y: y.data.column(0).into_owned(),
        x: x.data,
        v_mean: v_mean.data,
        v_var: v_var.map(|t| t.data),
    })?;
    Ok(LoadedData {
        validated,
        x_names: x.headers,
        v_mean_names: v_mean.headers,
        v_var_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn parses_well_formed_files() {
        let dir = tempfile::tempdir().unwrap();
        let y = write(dir.path(), "y.csv", "y\n1\n2\n4\n");
        let x = write(dir.path(), "x.csv", "a,b\n1,0\n0,1\n1, 1\n");
        let v = write(dir.path(), "v.csv", "z\n0.5\n-1\n2e-1\n");
        let loaded = load_dataset(&y, &x, Some(&v), None).unwrap();
        let data = &loaded.validated.data;
        assert_eq!(data.n(), 3);
        assert_eq!(data.p(), 2);
        assert_eq!(data.v_var(), data.v_mean());
        assert_eq!(data.v_mean().ncols(), 2);
        assert_eq!(data.v_mean()[(2, 1)], 0.2);
        assert!(loaded.validated.mean_intercept_injected);
        assert_eq!(loaded.v_var_names, vec!["z".to_string()]);
    }

    #[test]
    fn reports_cell_position() {
        let mut body = String::from("x1");
        for k in 2..=17 {
            body.push_str(&format!(",x{k}"));
        }
        body.push('\n');
        body.push_str(&vec!["1"; 17].join(","));
        body.push('\n');
        let mut row = vec!["1"; 17];
        row[16] = "abc";
        body.push_str(&row.join(","));
        body.push('\n');
        let err = parse_table(body.as_bytes(), "x.csv").unwrap_err().to_string();
        assert!(err.contains("row 2, column 'x17'"), "{err}");
    }

    #[test]
    fn rejects_ragged_rows() {
        let err = parse_table("a,b\n1,2\n3\n".as_bytes(), "t.csv").unwrap_err().to_string();
        assert!(err.contains("row 2 has 1 fields"), "{err}");
    }

    #[test]
    fn selects_columns_by_name() {
        let t = parse_table("a,b,c\n1,2,3\n4,5,6\n".as_bytes(), "t").unwrap();
        let m = t.select(&["c".into(), "a".into()]).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 6.0, 4.0]));
        assert!(t.select(&["d".into()]).is_err());
    }
}
