//! Test verdicts and their diagnostics rows.

/// Which sub-test a diagnostic row (or a rejection) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubTest {
    HcCap,
    Hc { t: u32 },
    Bulk,
    Inter { l: usize },
    HcVarCap,
    HcVar { t: u32 },
    BulkVar,
    InterVar { l: usize },
    Trim,
    S4,
}

impl std::fmt::Display for SubTest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubTest::HcCap => write!(f, "HC-cap"),
            SubTest::Hc { t } => write!(f, "HC({t})"),
            SubTest::Bulk => write!(f, "Bulk"),
            SubTest::Inter { l } => write!(f, "Inter({l})"),
            SubTest::HcVarCap => write!(f, "HCvar-cap"),
            SubTest::HcVar { t } => write!(f, "HCvar({t})"),
            SubTest::BulkVar => write!(f, "BulkVar"),
            SubTest::InterVar { l } => write!(f, "InterVar({l})"),
            SubTest::Trim => write!(f, "Trim"),
            SubTest::S4 => write!(f, "S4"),
        }
    }
}

/// One evaluated grid point: statistic against threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub sub_test: SubTest,
    pub param: f64,
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
}

impl DiagnosticRow {
    pub fn new(sub_test: SubTest, param: f64, statistic: f64, threshold: f64) -> Self {
        DiagnosticRow {
            sub_test,
            param,
            statistic,
            threshold,
            reject: statistic >= threshold,
        }
    }

    /// CSV row: (sub_test, param, statistic, threshold, reject).
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.sub_test, self.param, self.statistic, self.threshold, self.reject
        )
    }
}

/// Reject/accept plus the full per-grid-point diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TestVerdict {
    pub reject: bool,
    pub fired_by: Option<SubTest>,
    pub diagnostics: Vec<DiagnosticRow>,
    /// Set when a log-CF statistic had to clamp at its positivity floor.
    pub degenerate_cf: bool,
}

impl TestVerdict {
    /// Assemble a verdict from its rows; `fired_by` is the first rejecting
    /// row in the order given.
    pub fn from_rows(diagnostics: Vec<DiagnosticRow>) -> Self {
        let fired_by = diagnostics.iter().find(|r| r.reject).map(|r| r.sub_test);
        TestVerdict {
            reject: fired_by.is_some(),
            fired_by,
            diagnostics,
            degenerate_cf: false,
        }
    }

    pub fn with_degenerate_cf(mut self, flag: bool) -> Self {
        self.degenerate_cf = flag;
        self
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.diagnostics.iter().map(|r| r.csv_row()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fired_by_is_first_rejecting_row() {
        let rows = vec![
            DiagnosticRow::new(SubTest::HcCap, 5.0, 0.0, 4.0),
            DiagnosticRow::new(SubTest::Hc { t: 1 }, 1.0, 10.0, 3.0),
            DiagnosticRow::new(SubTest::Bulk, 1.0, 9.0, 2.0),
        ];
        let v = TestVerdict::from_rows(rows);
        assert!(v.reject);
        assert_eq!(v.fired_by, Some(SubTest::Hc { t: 1 }));
        assert_eq!(v.reject, v.fired_by.is_some());
    }

    #[test]
    fn accept_has_no_fired_by() {
        let rows = vec![DiagnosticRow::new(SubTest::Bulk, 1.0, 0.5, 2.0)];
        let v = TestVerdict::from_rows(rows);
        assert!(!v.reject && v.fired_by.is_none());
        assert_eq!(v.csv_rows().len(), 1);
    }
}
