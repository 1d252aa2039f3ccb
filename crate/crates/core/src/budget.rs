//! Annotation budget planning: how many images of each label form a fixed
//! amount of annotator time buys under a given policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::weak_labels::{AnnotationCost, WeakKind};

/// Twelve hours of annotator time.
pub const DEFAULT_BUDGET_SECONDS: f64 = 43_200.0;
/// Polygon-annotated images kept by the mixed policies.
pub const DEFAULT_STRONG_BASE: u64 = 560;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("budget must be positive and finite, got {0}")]
    InvalidBudget(f64),
    #[error("annotation costs must all be positive and finite")]
    InvalidCosts,
    #[error("polygon fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotationPolicy<T = f64> {
    /// Whole budget spent on polygons.
    Strong,
    /// Fixed polygon base, remaining time split evenly over the four weak forms.
    EqualTime,
    /// Fixed polygon base, remaining time buys the same count of each weak form.
    EqualNumber,
    /// A fraction of the budget on polygons, the rest on one weak form.
    MixedFraction { poly_fraction: T, weak_kind: WeakKind },
}

impl<T: Scalar> AnnotationPolicy<T> {
    pub fn name(&self) -> String {
        match self {
            AnnotationPolicy::Strong => "Strong".to_owned(),
            AnnotationPolicy::EqualTime => "Equal Time".to_owned(),
            AnnotationPolicy::EqualNumber => "Equal Number".to_owned(),
            AnnotationPolicy::MixedFraction {
                poly_fraction,
                weak_kind,
            } => format!(
                "{}% Poly + {}",
                (poly_fraction.to_f64_lossy() * 100.0).round(),
                weak_kind
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Allocation<T = f64> {
    pub poly: u64,
    pub tight: u64,
    pub loose: u64,
    pub coarse: u64,
    pub tag: u64,
    pub total_cost: T,
    /// Set when the budget could not cover the policy's polygon images.
    pub insufficient_budget: bool,
}

impl<T: Scalar> Allocation<T> {
    pub fn weak_mut(&mut self, kind: WeakKind) -> &mut u64 {
        match kind {
            WeakKind::Tight => &mut self.tight,
            WeakKind::Loose => &mut self.loose,
            WeakKind::Coarse => &mut self.coarse,
            WeakKind::Tag => &mut self.tag,
        }
    }

    pub fn weak(&self, kind: WeakKind) -> u64 {
        match kind {
            WeakKind::Tight => self.tight,
            WeakKind::Loose => self.loose,
            WeakKind::Coarse => self.coarse,
            WeakKind::Tag => self.tag,
        }
    }

    /// Table-style image amount, e.g. `560+58+81+152+1143`, and the label
    /// forms it covers, e.g. `Poly+T+L+C+I`.
    pub fn amount_and_forms(&self) -> (String, String) {
        let mut amounts = Vec::new();
        let mut forms = Vec::new();
        for (n, f) in [
            (self.poly, "Poly"),
            (self.tight, "T"),
            (self.loose, "L"),
            (self.coarse, "C"),
            (self.tag, "I"),
        ] {
            if n > 0 {
                amounts.push(n.to_string());
                forms.push(f);
            }
        }
        (amounts.join("+"), forms.join("+"))
    }
}

fn floor_div<T: Scalar>(amount: T, cost: T) -> u64 {
    if amount <= T::zero() {
        return 0;
    }
    (amount / cost).floor().to_u64().unwrap_or(0)
}

fn count<T: Scalar>(n: u64) -> T {
    T::from_u64(n).unwrap()
}

/// Allocates `budget` seconds of annotation time under `policy`.
pub fn plan<T: Scalar>(
    policy: &AnnotationPolicy<T>,
    budget: T,
    costs: &AnnotationCost<T>,
    strong_base: u64,
) -> Result<Allocation<T>, BudgetError> {
    if !(budget.is_finite() && budget > T::zero()) {
        return Err(BudgetError::InvalidBudget(budget.to_f64_lossy()));
    }
    if !costs.is_valid() {
        return Err(BudgetError::InvalidCosts);
    }
    let mut a = Allocation::<T>::default();
    match *policy {
        AnnotationPolicy::Strong => {
            a.poly = floor_div(budget, costs.polygon);
            a.insufficient_budget = a.poly == 0;
        }
        AnnotationPolicy::EqualTime | AnnotationPolicy::EqualNumber => {
            let affordable = floor_div(budget, costs.polygon);
            a.poly = strong_base.min(affordable);
            a.insufficient_budget = affordable < strong_base;
            let remaining = budget - count::<T>(a.poly) * costs.polygon;
            if matches!(policy, AnnotationPolicy::EqualTime) {
                let quarter = remaining / T::lit(4.0);
                for k in WeakKind::ALL {
                    *a.weak_mut(k) = floor_div(quarter, costs.weak(k));
                }
            } else {
                let per_set = WeakKind::ALL
                    .iter()
                    .fold(T::zero(), |acc, &k| acc + costs.weak(k));
                let n = floor_div(remaining, per_set);
                for k in WeakKind::ALL {
                    *a.weak_mut(k) = n;
                }
            }
        }
        AnnotationPolicy::MixedFraction {
            poly_fraction,
            weak_kind,
        } => {
            if !(poly_fraction > T::zero() && poly_fraction < T::one()) {
                return Err(BudgetError::InvalidFraction(poly_fraction.to_f64_lossy()));
            }
            a.poly = floor_div(poly_fraction * budget, costs.polygon);
            a.insufficient_budget = a.poly == 0;
            *a.weak_mut(weak_kind) = floor_div((T::one() - poly_fraction) * budget, costs.weak(weak_kind));
        }
    }
    a.total_cost = estimate_cost(&a, costs);
    Ok(a)
}

/// Total annotation time of an allocation.
pub fn estimate_cost<T: Scalar>(a: &Allocation<T>, costs: &AnnotationCost<T>) -> T {
    count::<T>(a.poly) * costs.polygon
        + count::<T>(a.tight) * costs.tight
        + count::<T>(a.loose) * costs.loose
        + count::<T>(a.coarse) * costs.coarse
        + count::<T>(a.tag) * costs.tag
}

/// The policy set of the budget comparison: Strong, Equal Time, Equal
/// Number and 80% polygons with each weak form.
pub fn standard_policies<T: Scalar>() -> Vec<AnnotationPolicy<T>> {
    let mut v = vec![
        AnnotationPolicy::Strong,
        AnnotationPolicy::EqualTime,
        AnnotationPolicy::EqualNumber,
    ];
    v.extend(WeakKind::ALL.iter().map(|&weak_kind| AnnotationPolicy::MixedFraction {
        poly_fraction: T::lit(0.8),
        weak_kind,
    }));
    v
}

/// CSV with one row per policy: name, image amount, label forms, total cost.
pub fn cost_table_csv<T: Scalar>(rows: &[(AnnotationPolicy<T>, Allocation<T>)]) -> String {
    let mut out = String::from("policy,image_amount,forms,total_cost_s\n");
    for (policy, alloc) in rows {
        let (amount, forms) = alloc.amount_and_forms();
        out.push_str(&format!(
            "{},{},{},{}\n",
            policy.name(),
            amount,
            forms,
            alloc.total_cost.to_f64_lossy()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn whole_second_costs() -> AnnotationCost {
        AnnotationCost {
            polygon: 61.0,
            ..AnnotationCost::default()
        }
    }

    #[test]
    fn default_allocations() {
        let c = AnnotationCost::<f64>::default();
        let b = DEFAULT_BUDGET_SECONDS;
        let s = plan(&AnnotationPolicy::Strong, b, &c, DEFAULT_STRONG_BASE).unwrap();
        assert_eq!(s.poly, 710);
        let t = plan(&AnnotationPolicy::EqualTime, b, &c, DEFAULT_STRONG_BASE).unwrap();
        assert_eq!((t.poly, t.tight, t.loose, t.coarse, t.tag), (560, 58, 81, 152, 1144));
        let n = plan(&AnnotationPolicy::EqualNumber, b, &c, DEFAULT_STRONG_BASE).unwrap();
        assert_eq!((n.poly, n.tight, n.loose, n.coarse, n.tag), (560, 108, 108, 108, 108));
        assert_eq!(n.amount_and_forms(), ("560+108+108+108+108".into(), "Poly+T+L+C+I".into()));
    }

    #[test]
    fn sixty_one_second_polygons_buy_708() {
        let s = plan(&AnnotationPolicy::Strong, 43_200.0, &whole_second_costs(), 560).unwrap();
        assert_eq!(s.poly, 708);
    }

    #[test]
    fn estimate_examples() {
        let c = whole_second_costs();
        assert_eq!(estimate_cost(&Allocation::default(), &c), 0.0);
        let one = Allocation {
            poly: 1,
            tight: 1,
            loose: 1,
            coarse: 1,
            tag: 1,
            ..Allocation::default()
        };
        assert_eq!(estimate_cost(&one, &c), 145.0);
    }

    #[test]
    fn small_budget_is_flagged() {
        let a = plan(&AnnotationPolicy::Strong, 30.0, &whole_second_costs(), 560).unwrap();
        assert_eq!(a.poly, 0);
        assert!(a.insufficient_budget);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = whole_second_costs();
        assert!(matches!(plan(&AnnotationPolicy::Strong, 0.0, &c, 1), Err(BudgetError::InvalidBudget(_))));
        let bad = AnnotationCost { tag: 0.0, ..c };
        assert_eq!(plan(&AnnotationPolicy::Strong, 10.0, &bad, 1), Err(BudgetError::InvalidCosts));
        let p = AnnotationPolicy::MixedFraction {
            poly_fraction: 1.0,
            weak_kind: WeakKind::Tag,
        };
        assert!(matches!(plan(&p, 10.0, &c, 1), Err(BudgetError::InvalidFraction(_))));
    }

    #[test]
    fn mixed_fraction_split() {
        let p = AnnotationPolicy::MixedFraction {
            poly_fraction: 0.8,
            weak_kind: WeakKind::Loose,
        };
        let a = plan(&p, 43_200.0, &AnnotationCost::default(), 0).unwrap();
        assert_eq!(a.poly, (0.8f64 * 43_200.0 / 60.8).floor() as u64);
        assert_eq!(a.loose, (0.2f64 * 43_200.0 / 28.0).floor() as u64);
        assert_eq!(a.tight + a.coarse + a.tag, 0);
    }

    #[test]
    fn table_csv_layout() {
        let c = AnnotationCost::<f64>::default();
        let rows: Vec<_> = standard_policies()
            .into_iter()
            .map(|p| {
                let a = plan(&p, DEFAULT_BUDGET_SECONDS, &c, DEFAULT_STRONG_BASE).unwrap();
                (p, a)
            })
            .collect();
        let csv = cost_table_csv(&rows);
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.contains("Equal Time,560+58+81+152+1144,Poly+T+L+C+I,"));
        assert!(csv.contains("80% Poly + tag,"));
    }
}
