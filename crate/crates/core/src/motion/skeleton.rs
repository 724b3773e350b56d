//! Fixed forward-kinematics chains. The 24-joint table (unit bone lengths,
//! left/right mirror pairing, foot joints) ships as JSON data.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::error::{DanceError, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Deserialize)]
struct JointSpec {
    name: String,
    parent: Option<usize>,
    offset: Vec3,
}

#[derive(Debug, Deserialize)]
struct SkeletonSpec {
    name: String,
    joints: Vec<JointSpec>,
    mirror_pairs: Vec<[usize; 2]>,
    feet: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct Skeleton {
    pub name: String,
    pub joint_names: Vec<String>,
    /// Parent index per joint; only joint 0 (the root) has none.
    pub parents: Vec<Option<usize>>,
    /// Offset from the parent in the parent's frame.
    pub offsets: Vec<Vec3>,
    /// `mirror[j]` is the joint that `j` swaps with; `None` when the skeleton
    /// has no pairing table.
    pub mirror: Option<Vec<usize>>,
    /// Left and right foot joints used for contact labels.
    pub feet: [usize; 2],
}

const SMPL24_JSON: &str = include_str!("../../data/smpl24.json");

fn parse(json: &str) -> Result<Skeleton> {
    let spec: SkeletonSpec = serde_json::from_str(json)?;
    let n = spec.joints.len();
    let mut mirror: Vec<usize> = (0..n).collect();
    for [a, b] in spec.mirror_pairs {
        if a >= n || b >= n {
            return Err(DanceError::InvalidData(format!("mirror pair ({a},{b}) out of range")));
        }
        mirror[a] = b;
        mirror[b] = a;
    }
    for (j, joint) in spec.joints.iter().enumerate() {
        match joint.parent {
            None if j != 0 => return Err(DanceError::InvalidData(format!("joint {j} has no parent"))),
            Some(p) if p >= j => return Err(DanceError::InvalidData(format!("joint {j} parent {p} not earlier"))),
            _ => {}
        }
    }
    Ok(Skeleton {
        name: spec.name,
        joint_names: spec.joints.iter().map(|j| j.name.clone()).collect(),
        parents: spec.joints.iter().map(|j| j.parent).collect(),
        offsets: spec.joints.iter().map(|j| j.offset).collect(),
        mirror: Some(mirror),
        feet: spec.feet,
    })
}

impl Skeleton {
    pub fn smpl24() -> &'static Skeleton {
        static SMPL: OnceLock<Skeleton> = OnceLock::new();
        SMPL.get_or_init(|| parse(SMPL24_JSON).expect("bundled skeleton table is valid"))
    }

    /// A straight chain of unit bones along +y, for joint counts without a
    /// bundled table. Has no mirror pairing; both "feet" are the chain end.
    pub fn chain(joints: usize) -> Skeleton {
        let end = joints.saturating_sub(1);
        Skeleton {
            name: format!("chain{joints}"),
            joint_names: (0..joints).map(|j| format!("joint{j}")).collect(),
            parents: (0..joints).map(|j| j.checked_sub(1)).collect(),
            offsets: (0..joints).map(|j| if j == 0 { [0.0; 3] } else { [0.0, 1.0, 0.0] }).collect(),
            mirror: None,
            feet: [end, end],
        }
    }

    pub fn for_joints(joints: usize) -> Skeleton {
        if joints == 24 {
            Skeleton::smpl24().clone()
        } else {
            Skeleton::chain(joints)
        }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn joint(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Global joint positions for one frame laid out as `J*9` row-major
    /// rotation entries followed by the root position.
    pub fn forward_kinematics(&self, frame: &[f32]) -> Vec<Vec3> {
        let j_count = self.len();
        let root_at = j_count * 9;
        let mut globals: Vec<Mat3> = Vec::with_capacity(j_count);
        let mut pos: Vec<Vec3> = Vec::with_capacity(j_count);
        for j in 0..j_count {
            let local = rotation_at(frame, j);
            match self.parents[j] {
                None => {
                    globals.push(local);
                    pos.push([
                        frame[root_at] as f64,
                        frame[root_at + 1] as f64,
                        frame[root_at + 2] as f64,
                    ]);
                }
                Some(p) => {
                    let off = mat_vec(&globals[p], &self.offsets[j]);
                    let pp = pos[p];
                    pos.push([pp[0] + off[0], pp[1] + off[1], pp[2] + off[2]]);
                    globals.push(mat_mul(&globals[p], &local));
                }
            }
        }
        pos
    }
}

pub fn rotation_at(frame: &[f32], joint: usize) -> Mat3 {
    let b = &frame[joint * 9..joint * 9 + 9];
    [
        [b[0] as f64, b[1] as f64, b[2] as f64],
        [b[3] as f64, b[4] as f64, b[5] as f64],
        [b[6] as f64, b[7] as f64, b[8] as f64],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
