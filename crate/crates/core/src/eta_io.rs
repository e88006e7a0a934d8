//! CSV bundle for the expectation data matrices.
//!
//! ```text
//! n,2
//! m,1
//! q,60
//! rollouts,1
//! grid,t_0,t_1,...,t_q
//! block,eta_xbar,<rows>,<cols>
//! <rows lines of cols numbers>
//! block,eta_ubar,<rows>,<cols>
//! ...
//! block,eta_xx,<rows>,<cols>
//! ...
//! block,eta_xu,<rows>,<cols>
//! ...
//! ```
//!
//! `rows = q · rollouts`. Lines starting with `#` are comments. Numbers
//! are written in shortest round-trip form, so export → import is exact.

use std::io::{Read, Write};

use crate::datagen::{DataMatrices, DataMode};
use crate::matstack::Mat;
use crate::{Error, Result};

const BLOCKS: [&str; 4] = ["eta_xbar", "eta_ubar", "eta_xx", "eta_xu"];

pub fn export_eta<W: Write>(data: &DataMatrices, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record(["n", &data.n.to_string()])?;
    w.write_record(["m", &data.m.to_string()])?;
    w.write_record(["q", &data.q().to_string()])?;
    w.write_record(["rollouts", &data.rollouts.to_string()])?;
    let mut grid = vec!["grid".to_string()];
    grid.extend(data.grid.iter().map(f64::to_string));
    w.write_record(&grid)?;
    for (name, block) in BLOCKS.iter().zip([
        &data.eta_xbar,
        &data.eta_ubar,
        &data.eta_xx,
        &data.eta_xu,
    ]) {
        w.write_record([
            "block",
            name,
            &block.nrows().to_string(),
            &block.ncols().to_string(),
        ])?;
        for row in block.row_iter() {
            w.write_record(row.iter().map(f64::to_string))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_num<T: std::str::FromStr>(field: &str, what: &str, line: u64) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse {what} from {field:?}")))
}

struct Lines<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
}

impl<R: Read> Lines<R> {
    fn next(&mut self, expecting: &str) -> Result<(u64, csv::StringRecord)> {
        match self.records.next() {
            Some(rec) => {
                let rec = rec?;
                let line = rec.position().map_or(0, |p| p.line());
                Ok((line, rec))
            }
            None => Err(Error::Parse(format!("unexpected end of file, expected {expecting}"))),
        }
    }

    fn header(&mut self, key: &str) -> Result<usize> {
        let (line, rec) = self.next(key)?;
        if rec.len() != 2 || &rec[0] != key {
            return Err(Error::Parse(format!("line {line}: expected `{key},<value>`")));
        }
        parse_num(&rec[1], key, line)
    }
}

pub fn import_eta<R: Read>(input: R) -> Result<DataMatrices> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut lines = Lines {
        records: reader.into_records(),
    };
    let n = lines.header("n")?;
    let m = lines.header("m")?;
    let q = lines.header("q")?;
    let rollouts = lines.header("rollouts")?;
    if n == 0 || m == 0 {
        return Err(Error::Dimension("n and m must be positive".into()));
    }
    if q == 0 {
        return Err(Error::Dimension("q must be at least 1".into()));
    }
    if rollouts == 0 {
        return Err(Error::Dimension("rollouts must be at least 1".into()));
    }
    let (line, rec) = lines.next("grid")?;
    if rec.get(0) != Some("grid") {
        return Err(Error::Parse(format!("line {line}: expected grid record")));
    }
    if rec.len() != q + 2 {
        return Err(Error::Dimension(format!(
            "line {line}: grid has {} points, expected q + 1 = {}",
            rec.len() - 1,
            q + 1
        )));
    }
    let grid = rec
        .iter()
        .skip(1)
        .map(|f| parse_num::<f64>(f, "grid time", line))
        .collect::<Result<Vec<_>>>()?;

    let rows = q * rollouts;
    let widths = [n * (n + 1) / 2, m * (m + 1) / 2, n * n, n * m];
    let mut blocks: [Option<Mat>; 4] = Default::default();
    for _ in 0..4 {
        let (line, rec) = lines.next("block header")?;
        if rec.len() != 4 || &rec[0] != "block" {
            return Err(Error::Parse(format!(
                "line {line}: expected `block,<name>,<rows>,<cols>`"
            )));
        }
        let idx = BLOCKS
            .iter()
            .position(|b| *b == &rec[1])
            .ok_or_else(|| Error::Parse(format!("line {line}: unknown block {:?}", &rec[1])))?;
        if blocks[idx].is_some() {
            return Err(Error::Parse(format!("line {line}: duplicate block {}", BLOCKS[idx])));
        }
        let r: usize = parse_num(&rec[2], "row count", line)?;
        let c: usize = parse_num(&rec[3], "column count", line)?;
        if (r, c) != (rows, widths[idx]) {
            return Err(Error::Dimension(format!(
                "line {line}: {} declared {r}x{c}, expected {rows}x{}",
                BLOCKS[idx], widths[idx]
            )));
        }
        let mut flat = Vec::with_capacity(r * c);
        for _ in 0..r {
            let (line, rec) = lines.next(&format!("{} row", BLOCKS[idx]))?;
            if rec.len() != c {
                return Err(Error::Dimension(format!(
                    "line {line}: {} row has {} values, expected {c}",
                    BLOCKS[idx],
                    rec.len()
                )));
            }
            for f in rec.iter() {
                flat.push(parse_num::<f64>(f, "value", line)?);
            }
        }
        blocks[idx] = Some(Mat::from_row_slice(r, c, &flat));
    }
    if let Some(extra) = lines.records.next() {
        let line = extra?.position().map_or(0, |p| p.line());
        return Err(Error::Parse(format!("line {line}: trailing data after the last block")));
    }
    let [xbar, ubar, xx, xu] = blocks;
    let data = DataMatrices {
        n,
        m,
        eta_xbar: xbar.expect("four distinct blocks read"),
        eta_ubar: ubar.expect("four distinct blocks read"),
        eta_xx: xx.expect("four distinct blocks read"),
        eta_xu: xu.expect("four distinct blocks read"),
        grid,
        rollouts,
        mode: DataMode::Imported,
    };
    data.validate()?;
    Ok(data)
}
