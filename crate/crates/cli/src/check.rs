use std::fs;
use std::path::PathBuf;

use condflow::verify::{self, CheckSizes, Faults, Scope};

use crate::error::CliError;

pub fn check(scope: Scope, seed: u64, out: Option<PathBuf>, wrong_gradient: bool) -> Result<(), CliError> {
    let results = verify::run_scope(scope, &CheckSizes::default(), seed, Faults { wrong_gradient });
    for r in &results {
        println!("{}", r);
    }
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        let mut csv = String::from("oracle,passed,measured,tolerance,detail\n");
        for r in &results {
            csv.push_str(&format!(
                "{},{},{:e},{:e},\"{}\"\n",
                r.name,
                r.passed,
                r.measured,
                r.tolerance,
                r.detail.replace('"', "'")
            ));
        }
        fs::write(dir.join("check.csv"), csv)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} oracles passed", results.len());
        Ok(())
    } else {
        Err(CliError::oracle(format!("oracle failure: {}", failed.join(", "))))
    }
}
