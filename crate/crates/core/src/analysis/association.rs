use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::experiment::RoundRecord;
use crate::prompting::VoteResponse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    Democrat,
    Republican,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarySupport {
    pub party: Party,
    /// Set when `p_dem == p_rep`; ties count as Republican support.
    pub tie: bool,
}

/// Democrat iff the Democratic probability is strictly larger; anything
/// else counts as Republican support.
pub fn binary_support(response: &VoteResponse) -> BinarySupport {
    let party = if response.p_dem > response.p_rep { Party::Democrat } else { Party::Republican };
    BinarySupport { party, tie: response.p_dem == response.p_rep }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, AnalysisError> {
        let table = Self { row_labels, col_labels, counts };
        table.validate()?;
        Ok(table)
    }

    /// Unlabelled table, rows and columns numbered from zero.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, AnalysisError> {
        let rows = counts.len();
        let cols = counts.first().map_or(0, Vec::len);
        Self::new((0..rows).map(|i| i.to_string()).collect(), (0..cols).map(|j| j.to_string()).collect(), counts)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |msg: &str| Err(AnalysisError::InvalidTable(msg.to_string()));
        if self.counts.len() < 2 || self.counts.iter().any(|row| row.len() < 2) {
            return bad("need at least 2 rows and 2 columns");
        }
        if self.counts.iter().any(|row| row.len() != self.counts[0].len()) {
            return bad("rows have different lengths");
        }
        if self.row_labels.len() != self.counts.len() || self.col_labels.len() != self.counts[0].len() {
            return bad("labels do not match the counts");
        }
        if self.total() == 0 {
            return bad("total count is zero");
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn col_totals(&self) -> Vec<u64> {
        (0..self.counts[0].len()).map(|j| self.counts.iter().map(|row| row[j]).sum()).collect()
    }
}

/// Cramer's V from Pearson's chi-squared against the independence
/// expectation `row_total * col_total / N`.
pub fn cramers_v(table: &ContingencyTable) -> Result<f64, AnalysisError> {
    table.validate()?;
    let rows = table.row_totals();
    let cols = table.col_totals();
    if let Some(i) = rows.iter().position(|&t| t == 0) {
        return Err(AnalysisError::ZeroMargin(format!("row {:?}", table.row_labels[i])));
    }
    if let Some(j) = cols.iter().position(|&t| t == 0) {
        return Err(AnalysisError::ZeroMargin(format!("column {:?}", table.col_labels[j])));
    }
    let n = table.total() as f64;
    let mut chi_squared = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &observed) in row.iter().enumerate() {
            let expected = rows[i] as f64 * cols[j] as f64 / n;
            chi_squared += (observed as f64 - expected).powi(2) / expected;
        }
    }
    let dof = (rows.len().min(cols.len()) - 1) as f64;
    Ok((chi_squared / (n * dof)).sqrt().min(1.0))
}

/// Cross-tabulates `variable` against binary party support over parsed
/// records. Rows follow `categories` when given (otherwise byte order), and
/// categories nobody holds are left out.
pub fn contingency_from_records<'a>(
    records: impl IntoIterator<Item = &'a RoundRecord>,
    variable: &str,
    categories: Option<&[String]>,
) -> Result<(ContingencyTable, usize), AnalysisError> {
    let mut tallies: BTreeMap<String, [u64; 2]> = BTreeMap::new();
    let mut ties = 0;
    for record in records {
        let Some(response) = record.parsed.as_ref() else { continue };
        let Some(category) = record.attributes.get(variable) else {
            return Err(AnalysisError::InvalidInput(format!(
                "record for agent {} in {} has no {variable:?} attribute",
                record.agent_id, record.state
            )));
        };
        let support = binary_support(response);
        ties += usize::from(support.tie);
        let column = match support.party {
            Party::Democrat => 0,
            Party::Republican => 1,
        };
        tallies.entry(category.clone()).or_default()[column] += 1;
    }
    if tallies.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let order: Vec<String> = match categories {
        Some(categories) => categories.iter().filter(|c| tallies.contains_key(*c)).cloned().collect(),
        None => tallies.keys().cloned().collect(),
    };
    if order.len() != tallies.len() {
        return Err(AnalysisError::InvalidInput(format!("records hold undeclared {variable:?} categories")));
    }
    let counts = order.iter().map(|c| tallies[c].to_vec()).collect();
    let table = ContingencyTable::new(order, vec!["Democrat".into(), "Republican".into()], counts)?;
    Ok((table, ties))
}
