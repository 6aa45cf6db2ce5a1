use std::fs::File;
use std::io::{BufWriter, Write};

use serde::Serialize;

use crate::config::RunConfig;

/// Writes result files into the output directory, each stamped with the config hash.
pub struct Output<'a> {
    pub cfg: &'a RunConfig,
    pub hash: String,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    config_hash: &'a str,
    config: &'a RunConfig,
    result: &'a T,
}

impl<'a> Output<'a> {
    pub fn new(cfg: &'a RunConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(&cfg.out)?;
        Ok(Output {
            cfg,
            hash: cfg.hash(),
            files: Vec::new(),
        })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, result: &T) -> std::io::Result<()> {
        let mut w = self.create(name)?;
        let env = Envelope {
            config_hash: &self.hash,
            config: self.cfg,
            result,
        };
        serde_json::to_writer_pretty(&mut w, &env)?;
        writeln!(w)?;
        w.flush()
    }

    /// A file whose first line is `# config_hash=...`.
    pub fn text(&mut self, name: &str) -> std::io::Result<BufWriter<File>> {
        let mut w = self.create(name)?;
        writeln!(w, "# config_hash={}", self.hash)?;
        Ok(w)
    }

    pub fn csv(&mut self, name: &str) -> std::io::Result<csv::Writer<BufWriter<File>>> {
        Ok(csv::Writer::from_writer(self.text(name)?))
    }

    fn create(&mut self, name: &str) -> std::io::Result<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.cfg.out.join(name))?))
    }
}
