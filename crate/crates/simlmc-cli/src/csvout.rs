//! CSV writers. Floats carry 17 significant digits so outputs are
//! byte-identical across runs with the same config and seed.

use std::fmt::Write as _;
use std::path::Path;

pub fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &str) -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "{header}");
        Self { buf }
    }

    pub fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    pub fn write(&self, dir: &Path, name: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), &self.buf)
    }
}
