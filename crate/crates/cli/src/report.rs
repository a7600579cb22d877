use crate::error::{CliError, CliResult};
use crate::manifest::Headline;

/// Method names as they appear in the results table.
pub const METHODS: [&str; 3] = ["MMD-VAE", "MMD-VAE + MCMC", "MMD-VAE + FP"];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<(&'static str, f64)>,
    pub missing: Vec<&'static str>,
}

impl ReportTable {
    pub fn from_headline(h: &Headline) -> CliResult<Self> {
        if h.is_empty() {
            return Err(CliError::Other("manifest holds no metric yet; run an eval-* command first".into()));
        }
        let mut rows = Vec::new();
        let mut missing = Vec::new();
        for (name, ap) in METHODS.into_iter().zip([h.direct_ap, h.mixture_ap, h.fp_ap]) {
            match ap {
                Some(v) => rows.push((name, v)),
                None => missing.push(name),
            }
        }
        Ok(ReportTable { rows, missing })
    }

    /// Values print in shortest round-trip form, identical to the CSV.
    pub fn text(&self) -> String {
        let width = METHODS.iter().map(|m| m.len()).max().unwrap_or(0);
        let mut s = format!("{:<width$}  AP\n", "method");
        for (name, ap) in &self.rows {
            s.push_str(&format!("{name:<width$}  {ap}\n"));
        }
        for name in &self.missing {
            s.push_str(&format!("({name}: not run)\n"));
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("method,average_precision\n");
        for (name, ap) in &self.rows {
            s.push_str(&format!("{name},{ap}\n"));
        }
        s
    }
}
