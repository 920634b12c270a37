use super::GrpoError;

/// Population mean and standard deviation (divide by G).
pub fn group_statistics(rewards: &[f64]) -> Result<(f64, f64), GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::InvalidGroup(format!(
            "group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::Numeric("non-finite reward".into()));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    Ok((mean, var.sqrt()))
}

/// `(r - μ) / σ`, or all zeros when `σ < std_floor`.
pub fn normalize_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    let (mean, std) = group_statistics(rewards)?;
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}
