//! Box-constrained Nelder-Mead.

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop once the spread of values across the simplex falls below this.
    pub f_tol: f64,
}

fn clamp_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

impl NelderMead {
    /// Minimizes `f` from `start`. Non-finite values count as `+inf`, so a
    /// failed evaluation is simply never preferred.
    pub fn minimize<F>(&self, mut f: F, start: &[f64], step: &[f64], lower: &[f64], upper: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let dim = start.len();
        let mut evals = 0;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
        let mut x0 = start.to_vec();
        clamp_into(&mut x0, lower, upper);
        simplex.push(x0.clone());
        for i in 0..dim {
            let mut x = x0.clone();
            x[i] += step[i];
            if x[i] > upper[i] {
                x[i] = x0[i] - step[i];
            }
            clamp_into(&mut x, lower, upper);
            simplex.push(x);
        }
        let mut values: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();

        loop {
            let mut order: Vec<usize> = (0..=dim).collect();
            order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
            simplex = order.iter().map(|i| simplex[*i].clone()).collect();
            values = order.iter().map(|i| values[*i]).collect();

            let (best, worst) = (values[0], values[dim]);
            if evals >= self.max_evals || (worst - best).abs() < self.f_tol {
                break;
            }

            let mut centroid = vec![0.0; dim];
            for x in &simplex[..dim] {
                for (c, v) in centroid.iter_mut().zip(x) {
                    *c += v / dim as f64;
                }
            }
            let towards = |coef: f64| {
                let mut x: Vec<f64> = centroid.iter().zip(&simplex[dim]).map(|(c, w)| c + coef * (c - w)).collect();
                clamp_into(&mut x, lower, upper);
                x
            };

            let reflected = towards(1.0);
            let fr = eval(&reflected, &mut evals);
            if fr < values[0] {
                let expanded = towards(2.0);
                let fe = eval(&expanded, &mut evals);
                if fe < fr {
                    simplex[dim] = expanded;
                    values[dim] = fe;
                } else {
                    simplex[dim] = reflected;
                    values[dim] = fr;
                }
                continue;
            }
            if fr < values[dim - 1] {
                simplex[dim] = reflected;
                values[dim] = fr;
                continue;
            }
            let (contracted, fc) = if fr < values[dim] {
                let x = towards(0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            } else {
                let x = towards(-0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            };
            if fc < values[dim].min(fr) {
                simplex[dim] = contracted;
                values[dim] = fc;
                continue;
            }
            for i in 1..=dim {
                let shrunk: Vec<f64> = simplex[0].iter().zip(&simplex[i]).map(|(b, x)| b + 0.5 * (x - b)).collect();
                values[i] = eval(&shrunk, &mut evals);
                simplex[i] = shrunk;
            }
        }
        Minimum { x: simplex.swap_remove(0), value: values[0], evaluations: evals }
    }
}
