use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::CliResult;

/// Where per-epoch JSON lines go: a log file if configured, else stdout.
pub struct EpochSink {
    file: Option<BufWriter<File>>,
}

impl EpochSink {
    pub fn open(path: Option<&Path>) -> CliResult<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(File::create(p)?))
            }
            None => None,
        };
        Ok(Self { file })
    }

    pub fn write<T: Serialize>(&mut self, line: &T, stdout: &mut dyn Write) -> CliResult<()> {
        let text = serde_json::to_string(line)?;
        match &mut self.file {
            Some(f) => writeln!(f, "{text}")?,
            None => writeln!(stdout, "{text}")?,
        }
        Ok(())
    }
}
