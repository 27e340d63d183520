//! Connected components and outer-boundary tracing on binary masks.

use ndarray::Array2;

/// Clockwise neighbour offsets `(dx, dy)` in image coordinates, from west.
const RING: [(isize, isize); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

fn ring_index(dx: isize, dy: isize) -> usize {
    RING.iter().position(|&d| d == (dx, dy)).expect("unit offset")
}

/// One 8-connected foreground component.
#[derive(Debug, Clone)]
pub struct Component {
    pub label: u32,
    /// Pixels as `(x, y)`, in discovery order.
    pub pixels: Vec<(usize, usize)>,
    /// First pixel in raster order.
    pub start: (usize, usize),
}

/// Labels 8-connected components. Labels start at 1; 0 is background.
/// Components are returned in raster order of their first pixel.
pub fn label_components(fg: &Array2<bool>) -> (Array2<u32>, Vec<Component>) {
    let (h, w) = fg.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !fg[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            let label = comps.len() as u32 + 1;
            labels[[y, x]] = label;
            stack.push((x, y));
            let mut pixels = Vec::new();
            while let Some((px, py)) = stack.pop() {
                pixels.push((px, py));
                for (dx, dy) in RING {
                    let (nx, ny) = (px as isize + dx, py as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if fg[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = label;
                        stack.push((nx, ny));
                    }
                }
            }
            comps.push(Component {
                label,
                pixels,
                start: (x, y),
            });
        }
    }
    (labels, comps)
}

/// Moore-neighbour trace of the outer boundary of component `label`,
/// starting at its first raster pixel and walking clockwise. Stops when the
/// start pixel is re-entered with the same first move. Returns boundary pixel
/// positions in visiting order; a single isolated pixel yields one point.
pub fn trace_outer_contour(labels: &Array2<u32>, label: u32, start: (usize, usize)) -> Vec<(usize, usize)> {
    let (h, w) = labels.dim();
    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && x < w as isize && y < h as isize && labels[[y as usize, x as usize]] == label
    };
    let s = (start.0 as isize, start.1 as isize);
    let mut contour = vec![start];
    let mut p = s;
    // The west neighbour of the first raster pixel is never part of the component.
    let mut back = 0usize;
    let mut first_move: Option<(isize, isize)> = None;
    let limit = 4 * w * h + 8;
    for _ in 0..limit {
        let mut next = None;
        for i in 1..=8 {
            let k = (back + i) % 8;
            let q = (p.0 + RING[k].0, p.1 + RING[k].1);
            if inside(q.0, q.1) {
                let prev = (back + i - 1) % 8;
                let b = (p.0 + RING[prev].0, p.1 + RING[prev].1);
                next = Some((q, ring_index(b.0 - q.0, b.1 - q.1)));
                break;
            }
        }
        let Some((q, nb)) = next else {
            return contour;
        };
        if p == s {
            match first_move {
                Some(f) if f == q => break,
                Some(_) => {}
                None => first_move = Some(q),
            }
        }
        p = q;
        back = nb;
        if p != s {
            contour.push((p.0 as usize, p.1 as usize));
        }
    }
    contour
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Array2<bool> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(y, x)| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn components_are_eight_connected() {
        let m = mask(&["#...", ".#..", "...#", "..##"]);
        let (_, comps) = label_components(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].pixels.len(), 2);
        assert_eq!(comps[1].pixels.len(), 3);
    }

    #[test]
    fn square_boundary() {
        let m = mask(&[".....", ".###.", ".###.", ".###.", "....."]);
        let (labels, comps) = label_components(&m);
        let c = trace_outer_contour(&labels, 1, comps[0].start);
        assert_eq!(c.len(), 8);
        assert_eq!(c[0], (1, 1));
        assert!(!c.contains(&(2, 2)));
        let unique: std::collections::BTreeSet<_> = c.iter().collect();
        assert_eq!(unique.len(), 8);
    }

    #[test]
    fn single_pixel_and_line() {
        let m = mask(&["...", ".#.", "..."]);
        let (labels, comps) = label_components(&m);
        assert_eq!(trace_outer_contour(&labels, 1, comps[0].start), vec![(1, 1)]);
        let line = mask(&["#####"]);
        let (labels, comps) = label_components(&line);
        let c = trace_outer_contour(&labels, 1, comps[0].start);
        let unique: std::collections::BTreeSet<_> = c.iter().collect();
        assert_eq!(unique.len(), 5);
    }

    #[test]
    fn ring_traces_only_the_outside() {
        let m = mask(&["#####", "#...#", "#...#", "#...#", "#####"]);
        let (labels, comps) = label_components(&m);
        let c = trace_outer_contour(&labels, 1, comps[0].start);
        assert_eq!(c.len(), 16);
    }
}
