//! Rotated BEV IoU by convex polygon clipping.

use crate::scene::Box3D;

type Pt = [f64; 2];

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let s: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum();
    0.5 * s.abs()
}

fn line_intersection(p1: Pt, p2: Pt, q1: Pt, q2: Pt) -> Pt {
    let d1 = [p2[0] - p1[0], p2[1] - p1[1]];
    let d2 = [q2[0] - q1[0], q2[1] - q1[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom.abs() < 1e-300 {
        return p1;
    }
    let t = ((q1[0] - p1[0]) * d2[1] - (q1[1] - p1[1]) * d2[0]) / denom;
    [p1[0] + t * d1[0], p1[1] + t * d1[1]]
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise `clip`.
pub fn clip_polygon(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners()))
}

/// IoU of the bird's-eye-view footprints.
pub fn rotated_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.w * a.l + b.w * b.l - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
