//! On-premises vs. cloud total cost of ownership.
//!
//! Costs are EUR, carried as `f64` and rounded only when written out.
//! Month indices are 1-based; procurement is charged in month 1.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hours in one billing month.
pub const HOURS_PER_MONTH: f64 = 730.0;

/// Lower and upper usage fractions of the sweep band.
pub const USAGE_BAND: (f64, f64) = (0.10, 0.70);

/// Usage fractions always reported individually by [`usage_sweep`].
pub const HIGHLIGHT_FRACTIONS: [f64; 2] = [0.20, 0.40];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Electricity {
    Fixed {
        eur_per_month: f64,
    },
    Modeled {
        power_max_kw: f64,
        idle_fraction: f64,
        tariff_eur_per_kwh: f64,
        #[serde(default)]
        solar_offset_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnPremScenario {
    pub procurement_eur: f64,
    pub electricity: Electricity,
    /// Hours for months 1, 2, ...; the last entry repeats.
    pub manpower_hours_by_month: Vec<f64>,
    pub manpower_rate_eur_per_hour: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pricing {
    Flat { eur_per_month: f64 },
    PerGpuHour { eur_per_gpu_hour: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudOffering {
    pub name: String,
    pub pricing: Pricing,
    #[serde(default)]
    pub commitment_months: u32,
}

impl CloudOffering {
    pub fn is_usage_priced(&self) -> bool {
        matches!(self.pricing, Pricing::PerGpuHour { .. })
    }
}

/// Monthly GPU usage together with the installed GPU count it refers to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UsageProfile {
    pub gpu_hours_per_month: f64,
    pub total_gpus: u32,
}

impl UsageProfile {
    pub fn from_hours(gpu_hours_per_month: f64, total_gpus: u32) -> Self {
        UsageProfile {
            gpu_hours_per_month,
            total_gpus,
        }
    }

    pub fn from_fraction(utilization_fraction: f64, total_gpus: u32) -> Self {
        UsageProfile {
            gpu_hours_per_month: utilization_fraction * total_gpus as f64 * HOURS_PER_MONTH,
            total_gpus,
        }
    }

    /// Share of installed GPU time in use, clamped to `[0, 1]`.
    pub fn busy_fraction(&self) -> f64 {
        if self.total_gpus == 0 {
            return 0.0;
        }
        (self.gpu_hours_per_month / (self.total_gpus as f64 * HOURS_PER_MONTH)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CostError {
    #[error("unknown offering {0:?}")]
    UnknownOffering(String),
    #[error("invalid cost scenario: {0}")]
    Invalid(String),
}

impl OnPremScenario {
    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |m: &str| Err(CostError::Invalid(m.to_string()));
        let non_neg = |v: f64| v >= 0.0 && v.is_finite();
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !non_neg(self.procurement_eur) || !non_neg(self.manpower_rate_eur_per_hour) {
            return bad("monetary values must be non-negative");
        }
        if self.manpower_hours_by_month.iter().any(|&h| !non_neg(h)) {
            return bad("manpower hours must be non-negative");
        }
        match self.electricity {
            Electricity::Fixed { eur_per_month } if !non_neg(eur_per_month) => {
                bad("electricity must be non-negative")
            }
            Electricity::Modeled {
                power_max_kw,
                idle_fraction,
                tariff_eur_per_kwh,
                solar_offset_fraction,
            } if !non_neg(power_max_kw)
                || !non_neg(tariff_eur_per_kwh)
                || !unit(idle_fraction)
                || !unit(solar_offset_fraction) =>
            {
                bad("electricity parameters out of range")
            }
            _ => Ok(()),
        }
    }
}

impl CloudOffering {
    pub fn validate(&self) -> Result<(), CostError> {
        let rate = match self.pricing {
            Pricing::Flat { eur_per_month } => eur_per_month,
            Pricing::PerGpuHour { eur_per_gpu_hour } => eur_per_gpu_hour,
        };
        if self.name.is_empty() || !(rate >= 0.0) || !rate.is_finite() {
            return Err(CostError::Invalid(format!(
                "offering {:?} needs a name and a non-negative rate",
                self.name
            )));
        }
        Ok(())
    }
}

/// Monthly electricity cost: idle draw plus the usage-dependent remainder, less any solar share.
pub fn electricity_cost(
    power_max_kw: f64,
    idle_fraction: f64,
    busy_fraction: f64,
    tariff_eur_per_kwh: f64,
    hours_in_month: f64,
    solar_offset_fraction: f64,
) -> f64 {
    tariff_eur_per_kwh
        * power_max_kw
        * hours_in_month
        * (idle_fraction + (1.0 - idle_fraction) * busy_fraction)
        * (1.0 - solar_offset_fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OnPremCost {
    pub procurement: f64,
    pub electricity: f64,
    pub manpower: f64,
    pub total: f64,
}

pub fn onprem_monthly(scenario: &OnPremScenario, month: u32, usage: &UsageProfile) -> OnPremCost {
    assert!(month >= 1, "months are 1-based");
    let procurement = if month == 1 { scenario.procurement_eur } else { 0.0 };
    let hours = &scenario.manpower_hours_by_month;
    let manpower_hours = match hours.len() {
        0 => 0.0,
        n => hours[(month as usize).min(n) - 1],
    };
    let manpower = manpower_hours * scenario.manpower_rate_eur_per_hour;
    let electricity = match scenario.electricity {
        Electricity::Fixed { eur_per_month } => eur_per_month,
        Electricity::Modeled {
            power_max_kw,
            idle_fraction,
            tariff_eur_per_kwh,
            solar_offset_fraction,
        } => electricity_cost(
            power_max_kw,
            idle_fraction,
            usage.busy_fraction(),
            tariff_eur_per_kwh,
            HOURS_PER_MONTH,
            solar_offset_fraction,
        ),
    };
    OnPremCost {
        procurement,
        electricity,
        manpower,
        total: procurement + electricity + manpower,
    }
}

pub fn cloud_monthly(offering: &CloudOffering, usage: &UsageProfile) -> f64 {
    match offering.pricing {
        Pricing::Flat { eur_per_month } => eur_per_month,
        Pricing::PerGpuHour { eur_per_gpu_hour } => eur_per_gpu_hour * usage.gpu_hours_per_month,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OfferingSeries {
    pub name: String,
    pub monthly: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl OfferingSeries {
    fn from_monthly(name: impl Into<String>, monthly: Vec<f64>) -> Self {
        let cumulative = monthly
            .iter()
            .scan(0.0, |acc, m| {
                *acc += m;
                Some(*acc)
            })
            .collect();
        OfferingSeries {
            name: name.into(),
            monthly,
            cumulative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSeries {
    pub n_months: u32,
    pub onprem_components: Vec<OnPremCost>,
    pub onprem: OfferingSeries,
    pub clouds: Vec<OfferingSeries>,
}

impl CostSeries {
    pub fn cloud(&self, name: &str) -> Option<&OfferingSeries> {
        self.clouds.iter().find(|c| c.name == name)
    }

    /// Writes `month,onprem_monthly,onprem_cumulative,<name>_monthly,<name>_cumulative,...`,
    /// values rounded to whole EUR.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "month".to_string(),
            "onprem_monthly".into(),
            "onprem_cumulative".into(),
        ];
        for c in &self.clouds {
            header.push(format!("{}_monthly", c.name));
            header.push(format!("{}_cumulative", c.name));
        }
        w.write_record(&header)?;
        for m in 0..self.n_months as usize {
            let mut row = vec![
                (m + 1).to_string(),
                eur(self.onprem.monthly[m]),
                eur(self.onprem.cumulative[m]),
            ];
            for c in &self.clouds {
                row.push(eur(c.monthly[m]));
                row.push(eur(c.cumulative[m]));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Whole-EUR presentation, rounding half away from zero.
pub fn eur(value: f64) -> String {
    format!("{}", value.round() as i64)
}

pub fn cumulative_series(
    scenario: &OnPremScenario,
    offerings: &[CloudOffering],
    usage: &UsageProfile,
    n_months: u32,
) -> CostSeries {
    assert!(n_months >= 1, "horizon must cover at least one month");
    let components: Vec<OnPremCost> = (1..=n_months)
        .map(|m| onprem_monthly(scenario, m, usage))
        .collect();
    let onprem =
        OfferingSeries::from_monthly("onprem", components.iter().map(|c| c.total).collect());
    let clouds = offerings
        .iter()
        .map(|o| OfferingSeries::from_monthly(o.name.clone(), vec![cloud_monthly(o, usage); n_months as usize]))
        .collect();
    CostSeries {
        n_months,
        onprem_components: components,
        onprem,
        clouds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BreakEven {
    Month(u32),
    Never,
}

impl BreakEven {
    pub fn month(self) -> Option<u32> {
        match self {
            BreakEven::Month(m) => Some(m),
            BreakEven::Never => None,
        }
    }
}

/// First month whose cumulative on-premises cost is no greater than the named cloud's.
pub fn break_even(series: &CostSeries, cloud_name: &str) -> Result<BreakEven, CostError> {
    let cloud = series
        .cloud(cloud_name)
        .ok_or_else(|| CostError::UnknownOffering(cloud_name.to_string()))?;
    let month = series
        .onprem
        .cumulative
        .iter()
        .zip(&cloud.cumulative)
        .position(|(&onprem, &cloud)| {
            // Relative slack absorbs float noise from scaled inputs.
            onprem <= cloud + 1e-12 * onprem.abs().max(cloud.abs())
        });
    Ok(match month {
        Some(i) => BreakEven::Month(i as u32 + 1),
        None => BreakEven::Never,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSeries {
    pub usage_fraction: f64,
    pub onprem_cumulative: Vec<f64>,
    pub cloud_cumulative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UsageSweep {
    pub offering: String,
    pub n_months: u32,
    pub series: Vec<SweepSeries>,
    /// Series at 0.20 and 0.40 usage.
    pub highlights: Vec<SweepSeries>,
    /// Series at the band edges, 0.10 (lower) and 0.70 (upper).
    pub band_lower: SweepSeries,
    pub band_upper: SweepSeries,
}

fn sweep_at(
    scenario: &OnPremScenario,
    offering: &CloudOffering,
    fraction: f64,
    total_gpus: u32,
    n_months: u32,
) -> SweepSeries {
    let usage = UsageProfile::from_fraction(fraction, total_gpus);
    let s = cumulative_series(scenario, std::slice::from_ref(offering), &usage, n_months);
    SweepSeries {
        usage_fraction: fraction,
        onprem_cumulative: s.onprem.cumulative,
        cloud_cumulative: s.clouds.into_iter().next().expect("one offering").cumulative,
    }
}

/// Cumulative costs of on-premises and `offering` for each usage fraction of `total_gpus`.
///
/// Since every cost is non-decreasing in usage, the band edges are the envelope
/// of all series inside the band.
pub fn usage_sweep(
    scenario: &OnPremScenario,
    offering: &CloudOffering,
    usage_fractions: &[f64],
    total_gpus: u32,
    n_months: u32,
) -> Result<UsageSweep, CostError> {
    if let Some(f) = usage_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(CostError::Invalid(format!("usage fraction {f} outside [0, 1]")));
    }
    let at = |f| sweep_at(scenario, offering, f, total_gpus, n_months);
    Ok(UsageSweep {
        offering: offering.name.clone(),
        n_months,
        series: usage_fractions.iter().map(|&f| at(f)).collect(),
        highlights: HIGHLIGHT_FRACTIONS.iter().map(|&f| at(f)).collect(),
        band_lower: at(USAGE_BAND.0),
        band_upper: at(USAGE_BAND.1),
    })
}

impl UsageSweep {
    /// Long-format plot data: `usage_fraction,month,onprem_cumulative,cloud_cumulative`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["usage_fraction", "month", "onprem_cumulative", "cloud_cumulative"])?;
        for s in &self.series {
            for m in 0..self.n_months as usize {
                w.write_record([
                    format!("{:.2}", s.usage_fraction),
                    (m + 1).to_string(),
                    eur(s.onprem_cumulative[m]),
                    eur(s.cloud_cumulative[m]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Band envelope and highlighted series, one row per month.
    pub fn write_band_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "month".to_string(),
            "onprem_lower".into(),
            "onprem_upper".into(),
            "cloud_lower".into(),
            "cloud_upper".into(),
        ];
        for h in &self.highlights {
            let pct = (h.usage_fraction * 100.0).round();
            header.push(format!("onprem_u{pct}"));
            header.push(format!("cloud_u{pct}"));
        }
        w.write_record(&header)?;
        for m in 0..self.n_months as usize {
            let mut row = vec![
                (m + 1).to_string(),
                eur(self.band_lower.onprem_cumulative[m]),
                eur(self.band_upper.onprem_cumulative[m]),
                eur(self.band_lower.cloud_cumulative[m]),
                eur(self.band_upper.cloud_cumulative[m]),
            ];
            for h in &self.highlights {
                row.push(eur(h.onprem_cumulative[m]));
                row.push(eur(h.cloud_cumulative[m]));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The reference on-premises scenario: 24,500 EUR procurement,
/// 250 EUR/month electricity, 40 h of setup work in each of the first two months
/// and 1 h/month afterwards at 30 EUR/h.
pub fn reference_onprem() -> OnPremScenario {
    OnPremScenario {
        procurement_eur: 24_500.0,
        electricity: Electricity::Fixed {
            eur_per_month: 250.0,
        },
        manpower_hours_by_month: vec![40.0, 40.0, 1.0],
        manpower_rate_eur_per_hour: 30.0,
    }
}

pub fn reference_offerings() -> Vec<CloudOffering> {
    vec![
        CloudOffering {
            name: "google".into(),
            pricing: Pricing::Flat {
                eur_per_month: 2057.0,
            },
            commitment_months: 36,
        },
        CloudOffering {
            name: "azure".into(),
            pricing: Pricing::Flat {
                eur_per_month: 2947.0,
            },
            commitment_months: 36,
        },
    ]
}

/// Observed mean monthly GPU usage used for calibration.
pub const REFERENCE_GPU_HOURS_PER_MONTH: f64 = 1843.0;
