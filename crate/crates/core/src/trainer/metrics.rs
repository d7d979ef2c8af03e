use std::io::Write;

use serde::Serialize;

pub const METRICS_HEADER: &str =
    "iter,lm_total,term1,term2,logp_eta_holdout,mode_coverage,gnorm_theta,gnorm_phi,gnorm_eta,wall_ms";

/// One evaluation of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: u64,
    /// `L̂^M_f` on the training batch of this iteration.
    pub lm_total: f64,
    pub term1: f64,
    pub term2: f64,
    /// Mean `log p_eta` over the held-out split.
    pub logp_eta_holdout: Option<f64>,
    /// Modes covered by generator samples, when the target mixture is known.
    pub mode_coverage: Option<usize>,
    /// Not part of the CSV; kept for reports.
    pub high_quality_fraction: Option<f64>,
    pub gnorm_theta: f64,
    pub gnorm_phi: f64,
    pub gnorm_eta: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            fmt_sig9(self.lm_total),
            fmt_sig9(self.term1),
            fmt_sig9(self.term2),
            opt(self.logp_eta_holdout),
            self.mode_coverage
                .map(|c| c.to_string())
                .unwrap_or_default(),
            fmt_sig9(self.gnorm_theta),
            fmt_sig9(self.gnorm_phi),
            fmt_sig9(self.gnorm_eta),
            self.wall_ms
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.lm_total,
            self.term1,
            self.term2,
            self.gnorm_theta,
            self.gnorm_phi,
            self.gnorm_eta,
        ]
        .iter()
        .chain(self.logp_eta_holdout.iter())
        .chain(self.high_quality_fraction.iter())
        .all(|v| v.is_finite())
    }
}

/// Nine significant digits, fixed notation for moderate magnitudes and
/// scientific otherwise, trailing zeros removed.
pub fn fmt_sig9(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let s = format!("{v:.8e}");
    let (mant, exp) = s.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mant.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(-2.5), "-2.5");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(123456.789012), "123456.789");
        assert_eq!(fmt_sig9(2.0 / 3.0 * 1e-7), "6.66666667e-8");
        assert_eq!(fmt_sig9(1.5e12), "1.5e12");
        assert_eq!(fmt_sig9(9.999999999e-6), "0.00001");
        assert_eq!(fmt_sig9(0.000123456789123), "0.000123456789");
    }

    proptest::proptest! {
        #[test]
        fn keeps_nine_digits(v in -1e12f64..1e12) {
            let back: f64 = fmt_sig9(v).parse().unwrap();
            proptest::prop_assert!((back - v).abs() <= 5e-9 * v.abs() + 1e-300);
        }
    }

    #[test]
    fn missing_values_are_empty_cells() {
        let row = MetricsRow {
            iteration: 7,
            lm_total: 0.5,
            term1: 1.0,
            term2: 0.5,
            logp_eta_holdout: None,
            mode_coverage: None,
            high_quality_fraction: None,
            gnorm_theta: 0.0,
            gnorm_phi: 0.0,
            gnorm_eta: 0.0,
            wall_ms: 0,
        };
        assert_eq!(row.csv_line(), "7,0.5,1,0.5,,,0,0,0,0");
        let mut buf = Vec::new();
        write_metrics_csv(&[row], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }
}
