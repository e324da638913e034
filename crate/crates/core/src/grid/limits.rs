use super::PowerFlowSolution;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitViolation {
    pub node: usize,
    /// Signed excess: negative below `v_min`, positive above `v_max`.
    pub excess: f64,
}

/// Nodes whose voltage lies outside `[v_min, v_max]`, in node order.
pub fn check_limits(sol: &PowerFlowSolution, v_min: f64, v_max: f64) -> Vec<LimitViolation> {
    sol.v
        .iter()
        .enumerate()
        .filter_map(|(node, &v)| {
            if v < v_min {
                Some(LimitViolation { node, excess: v - v_min })
            } else if v > v_max {
                Some(LimitViolation { node, excess: v - v_max })
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sol(v: Vec<f64>) -> PowerFlowSolution {
        PowerFlowSolution {
            angle: vec![0.0; v.len()],
            v,
            flows: vec![],
            losses: vec![],
            converged: true,
            iterations: 1,
            max_mismatch: 0.0,
        }
    }

    #[test]
    fn flat_profile_has_no_violations() {
        assert!(check_limits(&sol(vec![1.0; 5]), 0.95, 1.05).is_empty());
    }

    #[test]
    fn signed_excess() {
        let v = check_limits(&sol(vec![1.0, 0.94, 1.07, 0.95]), 0.95, 1.05);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].node, 1);
        assert!((v[0].excess + 0.01).abs() < 1e-12);
        assert_eq!(v[1].node, 2);
        assert!((v[1].excess - 0.02).abs() < 1e-12);
    }
}
