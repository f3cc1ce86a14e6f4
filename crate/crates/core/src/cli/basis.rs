use super::{BuildBasisArgs, Outcome};
use crate::error::{Error, Result};
use crate::io::{load_keypoints, save_basis};
use crate::shape::{build_pca_basis, ComponentSelection, ShapeBasis};

pub(super) fn run(args: &BuildBasisArgs) -> Result<Outcome> {
    let first = load_keypoints(&args.files[0])?;
    let names = first.names.clone();
    let mut instances = vec![first.points];
    for path in &args.files[1..] {
        let kps = load_keypoints(path)?;
        let order = first_order(&names, &kps.names).ok_or_else(|| {
            Error::InvalidInput(format!(
                "{}: keypoint names {:?} differ from {:?}",
                path.display(),
                kps.names,
                names
            ))
        })?;
        instances.push(nalgebra::Matrix3xX::from_fn(names.len(), |r, c| kps.points[(r, order[c])]));
    }
    let basis = if instances.len() == 1 {
        ShapeBasis::rigid(instances.remove(0), names)?
    } else {
        let selection = match (args.components, args.variance_target) {
            (Some(k), _) => ComponentSelection::Count(k),
            (None, Some(t)) => ComponentSelection::VarianceTarget(t),
            (None, None) => ComponentSelection::default(),
        };
        build_pca_basis(&instances, names, selection)?
    };
    save_basis(&args.out, &basis)?;

    println!("mode  eigenvalue  cumulative");
    for (i, (e, c)) in basis.eigenvalues.iter().zip(basis.explained_variance()).enumerate() {
        println!("{:>4}  {e:>10.4e}  {:>9.2}%", i + 1, 100.0 * c);
    }
    println!(
        "{} instances, {} keypoints, {} modes",
        args.files.len(),
        basis.num_keypoints(),
        basis.num_modes()
    );
    Ok(Outcome::Success)
}

/// Column of each reference name in `other`, if both hold the same names.
fn first_order(reference: &[String], other: &[String]) -> Option<Vec<usize>> {
    if reference.len() != other.len() {
        return None;
    }
    reference.iter().map(|n| other.iter().position(|o| o == n)).collect()
}
