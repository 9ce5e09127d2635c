//! Saturated design: covariate groups crossed with a binary instrument.
//!
//! Observation `i` belongs to group `group_of[i]`; the saturated first stage
//! has one dummy per group and one instrument interaction per group. A *cell*
//! is a group further split by instrument status. Cells are indexed as
//! `2 * g` (instrument active) and `2 * g + 1` (inactive).

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Group membership and instrument status of every observation.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SaturatedDesign {
    group_of: Vec<usize>,
    instrument: Vec<bool>,
    group_sizes: Vec<usize>,
    treated_counts: Vec<usize>,
}

impl SaturatedDesign {
    /// Builds a design from precomputed group indices.
    ///
    /// Group indices must cover `0..G` with every group non-empty.
    pub fn from_parts(group_of: Vec<usize>, instrument: Vec<bool>) -> Result<Self> {
        if group_of.len() != instrument.len() {
            return Err(Error::LengthMismatch {
                expected: group_of.len(),
                found: instrument.len(),
            });
        }
        if group_of.is_empty() {
            return Err(Error::EmptyDesign);
        }
        let groups = group_of.iter().max().map_or(0, |&g| g + 1);
        let mut group_sizes = vec![0usize; groups];
        let mut treated_counts = vec![0usize; groups];
        for (&g, &q) in group_of.iter().zip(&instrument) {
            group_sizes[g] += 1;
            treated_counts[g] += usize::from(q);
        }
        if let Some(g) = group_sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyGroup { group: g });
        }
        Ok(Self {
            group_of,
            instrument,
            group_sizes,
            treated_counts,
        })
    }

    pub fn n(&self) -> usize {
        self.group_of.len()
    }

    pub fn groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn instrument(&self) -> &[bool] {
        &self.instrument
    }

    /// `n_g` for every group.
    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// `m_g` for every group: the number of units with an active instrument.
    pub fn treated_counts(&self) -> &[usize] {
        &self.treated_counts
    }

    pub fn cells(&self) -> usize {
        2 * self.groups()
    }

    /// Cell of observation `i`.
    #[inline]
    pub fn cell_of(&self, i: usize) -> usize {
        2 * self.group_of[i] + usize::from(!self.instrument[i])
    }

    /// Size of cell `c`: `m_g` for the active cell, `n_g - m_g` otherwise.
    #[inline]
    pub fn cell_size(&self, c: usize) -> usize {
        let g = c / 2;
        if c % 2 == 0 {
            self.treated_counts[g]
        } else {
            self.group_sizes[g] - self.treated_counts[g]
        }
    }

    /// Fails with [`Error::DegenerateGroup`] unless `0 < m_g < n_g` everywhere.
    pub fn require_variation(&self) -> Result<()> {
        for (g, (&size, &active)) in self.group_sizes.iter().zip(&self.treated_counts).enumerate() {
            if active == 0 || active == size {
                return Err(Error::DegenerateGroup { group: g, size, active });
            }
        }
        Ok(())
    }

    /// Fails with [`Error::GroupSizeViolation`] unless `m_g >= 2` and
    /// `n_g - m_g >= 2` everywhere.
    pub fn require_group_sizes(&self) -> Result<()> {
        for (g, (&size, &active)) in self.group_sizes.iter().zip(&self.treated_counts).enumerate() {
            if active < 2 || size - active < 2 {
                return Err(Error::GroupSizeViolation { group: g, size, active });
            }
        }
        Ok(())
    }

    /// Keeps the listed groups (in the given order of group index) and returns
    /// the compacted design together with the surviving row indices.
    pub fn retain_groups(&self, keep: &[usize]) -> Result<(Self, Vec<usize>)> {
        let mut remap = vec![usize::MAX; self.groups()];
        let mut kept: Vec<usize> = keep.to_vec();
        kept.sort_unstable();
        kept.dedup();
        for (new, &old) in kept.iter().enumerate() {
            if old >= self.groups() {
                return Err(Error::InvalidParameter(alloc::format!("group {old} out of range")));
            }
            remap[old] = new;
        }
        let rows: Vec<usize> = (0..self.n()).filter(|&i| remap[self.group_of[i]] != usize::MAX).collect();
        if rows.is_empty() {
            return Err(Error::EmptyDesign);
        }
        let group_of = rows.iter().map(|&i| remap[self.group_of[i]]).collect();
        let instrument = rows.iter().map(|&i| self.instrument[i]).collect();
        Ok((Self::from_parts(group_of, instrument)?, rows))
    }
}

/// Outcome and treatment aligned with a design.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Sample {
    pub outcome: Vec<f64>,
    pub treatment: Vec<f64>,
}

impl Sample {
    pub fn new(outcome: Vec<f64>, treatment: Vec<f64>) -> Result<Self> {
        if outcome.len() != treatment.len() {
            return Err(Error::LengthMismatch {
                expected: outcome.len(),
                found: treatment.len(),
            });
        }
        check_finite("outcome", &outcome)?;
        check_finite("treatment", &treatment)?;
        Ok(Self { outcome, treatment })
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    /// Fails unless the sample has exactly `design.n()` rows.
    pub fn check_against(&self, design: &SaturatedDesign) -> Result<()> {
        if self.len() != design.n() {
            return Err(Error::LengthMismatch {
                expected: design.n(),
                found: self.len(),
            });
        }
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
            treatment: rows.iter().map(|&i| self.treatment[i]).collect(),
        }
    }
}

pub(crate) fn check_finite(what: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn instrument_flags(instrument: &[f64]) -> Result<Vec<bool>> {
    instrument
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value == 1.0 {
                Ok(true)
            } else if value == 0.0 {
                Ok(false)
            } else {
                Err(Error::NonBinaryInstrument { index, value })
            }
        })
        .collect()
}

/// Groups observations by exact equality of their covariate tuples.
///
/// Group indices follow first appearance in row order.
pub fn build_design<K: Ord + Clone>(covariate_rows: &[K], instrument: &[f64]) -> Result<SaturatedDesign> {
    build_design_keyed(covariate_rows, instrument).map(|(design, _)| design)
}

/// Like [`build_design`], also returning the covariate value of every group.
pub fn build_design_keyed<K: Ord + Clone>(
    covariate_rows: &[K],
    instrument: &[f64],
) -> Result<(SaturatedDesign, Vec<K>)> {
    if covariate_rows.len() != instrument.len() {
        return Err(Error::LengthMismatch {
            expected: covariate_rows.len(),
            found: instrument.len(),
        });
    }
    let flags = instrument_flags(instrument)?;
    let mut index: BTreeMap<&K, usize> = BTreeMap::new();
    let mut keys = Vec::new();
    let mut group_of = Vec::with_capacity(covariate_rows.len());
    for row in covariate_rows {
        let next = keys.len();
        let g = *index.entry(row).or_insert_with(|| {
            keys.push(row.clone());
            next
        });
        group_of.push(g);
    }
    Ok((SaturatedDesign::from_parts(group_of, flags)?, keys))
}

/// A group that fails the size thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GroupViolation {
    pub group: usize,
    pub size: usize,
    pub active: usize,
    pub reason: ViolationReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "snake_case"))]
pub enum ViolationReason {
    TooFewActive,
    TooFewInactive,
    TooFewBoth,
    GroupTooSmall,
}

/// Partition of the groups into kept and violating ones.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GroupAudit {
    pub violations: Vec<GroupViolation>,
    pub kept_groups: Vec<usize>,
}

impl GroupAudit {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Size thresholds applied per covariate group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GroupThresholds {
    pub min_active: usize,
    pub min_inactive: usize,
    /// Minimum `n_g`; `1` disables the check.
    pub min_size: usize,
}

impl GroupThresholds {
    /// `m_g >= 2`, `n_g - m_g >= 2`.
    pub const STANDARD: Self = Self {
        min_active: 2,
        min_inactive: 2,
        min_size: 1,
    };
    /// `m_g >= 3`, `n_g - m_g >= 3`: every cell admits the Hartley inverse.
    pub const STRENGTHENED: Self = Self {
        min_active: 3,
        min_inactive: 3,
        min_size: 1,
    };
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Lists every group with `m_g < min_active` or `n_g - m_g < min_inactive`.
pub fn validate_group_sizes(design: &SaturatedDesign, min_active: usize, min_inactive: usize) -> GroupAudit {
    audit_groups(
        design,
        GroupThresholds {
            min_active,
            min_inactive,
            min_size: 1,
        },
    )
}

pub fn audit_groups(design: &SaturatedDesign, thresholds: GroupThresholds) -> GroupAudit {
    let mut audit = GroupAudit::default();
    for (g, (&size, &active)) in design.group_sizes().iter().zip(design.treated_counts()).enumerate() {
        let few_active = active < thresholds.min_active;
        let few_inactive = size - active < thresholds.min_inactive;
        let reason = match (size < thresholds.min_size, few_active, few_inactive) {
            (true, _, _) => Some(ViolationReason::GroupTooSmall),
            (false, true, true) => Some(ViolationReason::TooFewBoth),
            (false, true, false) => Some(ViolationReason::TooFewActive),
            (false, false, true) => Some(ViolationReason::TooFewInactive),
            (false, false, false) => None,
        };
        match reason {
            Some(reason) => audit.violations.push(GroupViolation {
                group: g,
                size,
                active,
                reason,
            }),
            None => audit.kept_groups.push(g),
        }
    }
    audit
}

/// Drops the violating groups, re-compacts group indices and subsets the
/// sample in lockstep. Surviving rows keep their relative order.
pub fn filter_design(
    design: &SaturatedDesign,
    audit: &GroupAudit,
    sample: &Sample,
) -> Result<(SaturatedDesign, Sample)> {
    sample.check_against(design)?;
    let (filtered, rows) = design.retain_groups(&audit.kept_groups)?;
    Ok((filtered, sample.select_rows(&rows)))
}

/// Counts describing a design.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct DesignSummary {
    pub n: usize,
    pub groups: usize,
    pub groups_per_observation: f64,
    pub min_group_size: usize,
    pub max_group_size: usize,
    pub min_active: usize,
    pub max_active: usize,
}

pub fn design_summary(design: &SaturatedDesign) -> DesignSummary {
    let sizes = design.group_sizes();
    let active = design.treated_counts();
    DesignSummary {
        n: design.n(),
        groups: design.groups(),
        groups_per_observation: design.groups() as f64 / design.n() as f64,
        min_group_size: sizes.iter().copied().min().unwrap_or(0),
        max_group_size: sizes.iter().copied().max().unwrap_or(0),
        min_active: active.iter().copied().min().unwrap_or(0),
        max_active: active.iter().copied().max().unwrap_or(0),
    }
}
