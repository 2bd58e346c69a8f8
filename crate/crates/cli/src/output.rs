use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nlogic_core::logic::Assignment;
use nlogic_core::ndarray::Array2;

use crate::error::{io_err, CliError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// First line of every output file.
pub fn header(config_hash: &str, seeds: &[u64]) -> String {
    let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    format!("# nlogic {VERSION} config={config_hash} seeds={}", seeds.join(","))
}

/// Creates `path` (and its parent directory) and writes the header line.
pub fn create(path: &Path, header: &str) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    Ok(w)
}

pub fn write_lines(path: &Path, header: &str, lines: &[String]) -> Result<(), CliError> {
    let mut w = create(path, header)?;
    for line in lines {
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_assignment(path: &Path, header: &str, truth: &Assignment) -> Result<(), CliError> {
    let mut lines = vec!["var,truth".to_string()];
    lines.extend(truth.values.iter().enumerate().map(|(i, &t)| format!("{i},{}", u8::from(t))));
    write_lines(path, header, &lines)
}

pub fn read_assignment(path: &Path) -> Result<Assignment, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut values = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() || line.starts_with("var") {
            continue;
        }
        let bad = || CliError::Data(format!("{}:{}: expected `var,0|1`", path.display(), i + 1));
        let (var, truth) = line.split_once(',').ok_or_else(bad)?;
        let var: usize = var.trim().parse().map_err(|_| bad())?;
        if var != values.len() {
            return Err(CliError::Data(format!(
                "{}:{}: variables must be listed in order",
                path.display(),
                i + 1
            )));
        }
        values.push(match truth.trim() {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        });
    }
    Ok(Assignment::new(values))
}

/// `var_id,truth,x_1..x_d` rows; floats print in shortest round-trip form.
pub fn write_embeddings(path: &Path, header: &str, table: &Array2<f64>, truth: Option<&Assignment>) -> Result<(), CliError> {
    let mut lines = Vec::with_capacity(table.nrows() + 1);
    let cols: Vec<String> = (1..=table.ncols()).map(|j| format!("x_{j}")).collect();
    lines.push(format!("var_id,truth,{}", cols.join(",")));
    for (i, row) in table.rows().into_iter().enumerate() {
        let t = truth
            .and_then(|a| a.values.get(i))
            .map(|&t| u8::from(t).to_string())
            .unwrap_or_default();
        let xs: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        lines.push(format!("{i},{t},{}", xs.join(",")));
    }
    write_lines(path, header, &lines)
}
