use super::DataError;

/// One leave-one-out fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: String,
}

/// One fold per scene, holding that scene out for testing.
pub fn leave_one_out_split(names: &[String]) -> Result<Vec<Fold>, DataError> {
    if names.len() < 2 {
        return Err(DataError::Split(format!(
            "leave-one-out needs at least 2 scenes, got {}",
            names.len()
        )));
    }
    Ok(names
        .iter()
        .map(|test| Fold {
            train: names.iter().filter(|n| *n != test).cloned().collect(),
            test: test.clone(),
        })
        .collect())
}
