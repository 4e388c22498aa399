//! Angle partitions and the subset collection built on them.
//!
//! The `l` projection angles are split into `k` folds by index modulo `k`.
//! Every `p`-element set of folds is a *member*: its angles feed the network
//! (as the mean of per-fold FBPs) and the remaining angles form the loss
//! target. Input and target rows of a member never overlap, so their noise
//! is independent.

use itertools::Itertools;

use crate::error::{invalid, Result};
use crate::tomo::{complement, fbp, restrict, Filter, Geometry, Image, Sinogram};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    n_angles: usize,
    folds: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn fold(&self, i: usize) -> &[usize] {
        &self.folds[i]
    }
}

/// Fold `i` holds the angle indices `j` with `j mod k == i`.
pub fn make_partition(n_angles: usize, k: usize) -> Result<Partition> {
    if k < 2 {
        return invalid(format!("need at least 2 folds, got {k}"));
    }
    if k > n_angles {
        return invalid(format!("{k} folds exceed {n_angles} angles"));
    }
    let folds = (0..k).map(|i| (i..n_angles).step_by(k).collect()).collect();
    Ok(Partition { n_angles, folds })
}

/// One element `I` of the subset collection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Member {
    /// Indices of the folds in `I`, increasing.
    pub folds: Vec<usize>,
    /// Union of the folds' angles, sorted.
    pub input_angle_ids: Vec<usize>,
    /// All remaining angles, sorted. Empty when `p == k`.
    pub target_angle_ids: Vec<usize>,
}

/// All `C(k, p)` members for subset size `p`, in lexicographic fold order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetSelection {
    p: usize,
    members: Vec<Member>,
}

impl SubsetSelection {
    pub fn new(partition: &Partition, p: usize) -> Result<Self> {
        let k = partition.k();
        if p == 0 || p > k {
            return invalid(format!("subset size must be in 1..={k}, got {p}"));
        }
        let members = (0..k)
            .combinations(p)
            .map(|folds| {
                let mut input: Vec<usize> = folds.iter().flat_map(|&f| partition.fold(f).iter().copied()).collect();
                input.sort_unstable();
                let target = complement(&input, partition.n_angles());
                Member { folds, input_angle_ids: input, target_angle_ids: target }
            })
            .collect();
        Ok(Self { p, members })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn check_consistent(member: &Member, partition: &Partition, geom: &Geometry) -> Result<()> {
    if partition.n_angles() != geom.n_angles() {
        return invalid(format!("partition covers {} angles, geometry has {}", partition.n_angles(), geom.n_angles()));
    }
    if member.folds.iter().any(|&f| f >= partition.k()) {
        return invalid("member references a fold outside the partition");
    }
    Ok(())
}

/// Mean over the member's folds of the per-fold FBP reconstructions.
pub fn network_input(
    y: &Sinogram,
    member: &Member,
    partition: &Partition,
    geom: &Geometry,
    filter: Filter,
) -> Result<Image> {
    check_consistent(member, partition, geom)?;
    let mut acc = Image::zeros(geom.image_height(), geom.image_width());
    for &f in &member.folds {
        let sub = fbp(&restrict(y, partition.fold(f))?, geom, filter)?;
        for (a, v) in acc.data_mut().iter_mut().zip(sub.data()) {
            *a += v;
        }
    }
    let p = member.folds.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= p);
    Ok(acc)
}

/// Rows of `y` outside the member's folds.
pub fn target_data(y: &Sinogram, member: &Member) -> Result<Sinogram> {
    if member.target_angle_ids.is_empty() {
        return invalid("member uses every fold, so its loss target is empty");
    }
    restrict(y, &member.target_angle_ids)
}
