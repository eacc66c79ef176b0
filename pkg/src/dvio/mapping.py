"""Semi-dense inverse-depth map of the active keyframe: candidate selection
on high-gradient pixels, discrete epipolar search, Gaussian depth-filter
updates, and keyframe creation/propagation.

Relative poses follow the tracking convention: (R_cr, t_cr) maps keyframe
coordinates to the other frame, x_cur = R_cr x_ref + t_cr.
"""

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .camera import ray
from .so3 import log_so3


class PointStatus(enum.Enum):
    CANDIDATE = "candidate"
    ACTIVE = "active"
    OUTLIER = "outlier"
    MARGINALIZED = "marginalized"


class MatchOutcome(enum.Enum):
    OK = "ok"
    DEGENERATE = "degenerate"       # baseline too small, nothing to update
    OFF_IMAGE = "off-image"         # search segment outside the image
    AMBIGUOUS = "ambiguous"         # second-best SSD too close to best


@dataclass(frozen=True)
class CandidatePoint:
    pixel: np.ndarray
    inv_depth: float
    variance: float
    status: PointStatus = PointStatus.CANDIDATE
    host_id: int = 0
    fail_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float))
        if self.status in (PointStatus.CANDIDATE, PointStatus.ACTIVE):
            if self.inv_depth <= 0 or self.variance <= 0:
                raise ValueError("live points need positive inverse depth and variance")


@dataclass(frozen=True)
class MatchResult:
    outcome: MatchOutcome
    inv_depth: float = 0.0
    variance: float = 0.0
    error: float = float("inf")


@dataclass(frozen=True)
class EpipolarSearchConfig:
    gradient_threshold: float = 7.0     # intensity per pixel
    search_range: float = 120.0         # max segment length, pixels
    patch_radius: int = 1               # 5-pixel cross at this radius
    variance_inflation: float = 1.4     # applied on ambiguous searches
    match_sigma_px: float = 1.0
    ambiguity_ratio: float = 1.2
    ambiguity_margin: float = 25.0      # absolute SSD gap, guards best ~ 0
    init_inv_depth: float = 1.0
    init_variance: float = 1.0
    activation_variance: float = 0.01   # promote below this
    max_failures: int = 5
    point_budget: int = 2000
    min_inv_depth: float = 1e-3
    propagation_sigma: float = 0.03     # relative inverse-depth noise per hop

    def __post_init__(self):
        if min(self.gradient_threshold, self.search_range, self.patch_radius,
               self.variance_inflation) <= 0:
            raise ValueError("search config values must be positive")

    def pattern(self):
        r = self.patch_radius
        return (np.array([0.0, r, -r, 0.0, 0.0]), np.array([0.0, 0.0, 0.0, r, -r]))


@dataclass
class Keyframe:
    """Reference frame holding the semi-dense depth map."""
    id: int
    timestamp: float
    pyramid: object
    state: object                   # State snapshot at creation
    points: list = field(default_factory=list)

    def live_points(self):
        return [p for p in self.points
                if p.status in (PointStatus.CANDIDATE, PointStatus.ACTIVE)]

    def active_points(self):
        return [p for p in self.points if p.status == PointStatus.ACTIVE]

    def tracking_arrays(self, max_rel_sigma=None):
        """(pixels (N,2), inverse depths (N,)) of the live points.

        With ``max_rel_sigma`` set, only points whose inverse-depth standard
        deviation is below that fraction of the estimate are returned; falls
        back to all live points when too few pass the cut.
        """
        live = self.live_points()
        if max_rel_sigma is not None:
            good = [p for p in live
                    if np.sqrt(p.variance) < max_rel_sigma * p.inv_depth]
            if len(good) >= 12:
                live = good
        if not live:
            return np.zeros((0, 2)), np.zeros(0)
        return (np.stack([p.pixel for p in live]),
                np.array([p.inv_depth for p in live]))

    def depth_map(self, dilate=True):
        """Dense inverse-depth image of the active points, 1-pixel dilated.

        Collisions keep the smaller-variance point; dilation fills the
        4-neighborhood of each point without overwriting occupied pixels.
        Empty pixels are 0.
        """
        h, w = self.pyramid.shape
        invd = np.zeros((h, w))
        var = np.full((h, w), np.inf)
        for p in self.active_points():
            u, v = int(round(p.pixel[0])), int(round(p.pixel[1]))
            if 0 <= u < w and 0 <= v < h and p.variance < var[v, u]:
                invd[v, u] = p.inv_depth
                var[v, u] = p.variance
        if dilate:
            src = invd.copy()
            for du, dv in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                shifted = np.roll(np.roll(src, dv, axis=0), du, axis=1)
                fill = (invd == 0) & (shifted > 0)
                invd[fill] = shifted[fill]
        return invd


def select_candidates(kf, target_count, config=None, cell=24, margin=4):
    """Pick approximately target_count high-gradient pixels, spread on a grid.

    Each grid cell contributes its top-gradient pixels above the threshold,
    so texture-rich regions cannot crowd out the rest of the image. Points
    start at the configured inverse-depth prior with large variance.
    """
    config = config or EpipolarSearchConfig()
    g = np.hypot(kf.pyramid.grad_x[0], kf.pyramid.grad_y[0])
    h, w = g.shape
    g = g.copy()
    g[:margin] = g[-margin:] = 0.0
    g[:, :margin] = g[:, -margin:] = 0.0

    cells_y = max(1, h // cell)
    cells_x = max(1, w // cell)
    per_cell = max(1, int(round(target_count / (cells_x * cells_y))))
    out = []
    for cy in range(cells_y):
        for cx in range(cells_x):
            y0, y1 = cy * cell, min((cy + 1) * cell, h)
            x0, x1 = cx * cell, min((cx + 1) * cell, w)
            block = g[y0:y1, x0:x1]
            flat = block.ravel()
            if flat.size == 0:
                continue
            order = np.argsort(flat)[::-1][:per_cell]
            for idx in order:
                if flat[idx] <= config.gradient_threshold:
                    break
                yy, xx = divmod(int(idx), block.shape[1])
                out.append(CandidatePoint(
                    pixel=np.array([x0 + xx, y0 + yy], dtype=float),
                    inv_depth=config.init_inv_depth,
                    variance=config.init_variance,
                    host_id=kf.id,
                ))
    return out


def _inv_depth_at_pixel(pixel_ref, match_px, R_cr, t_cr, intr):
    """Closed-form inverse depth from a matched pixel pair.

    Solves m x (R h + rho t) = 0 in least squares for rho, where h and m are
    the unit-z rays of the reference and matched pixels.
    """
    h = ray(pixel_ref, intr)
    m = ray(match_px, intr)
    a = np.cross(m, R_cr @ h)
    b = np.cross(m, t_cr)
    denom = float(b @ b)
    if denom < 1e-18:
        return None
    return float(-(a @ b) / denom)


def epipolar_search(point, kf, frame_pyramid, R_cr, t_cr, intr, config=None):
    """Discrete 1-px search along the epipolar segment spanned by the point's
    2-sigma inverse-depth interval, SSD over a 5-pixel cross pattern, with
    parabola sub-pixel refinement."""
    config = config or EpipolarSearchConfig()
    rho = point.inv_depth
    sigma = float(np.sqrt(point.variance))
    rho_min = max(rho - 2.0 * sigma, config.min_inv_depth)
    rho_max = rho + 2.0 * sigma

    h = ray(point.pixel, intr)
    Rh = R_cr @ h

    def pix(r):
        v = Rh + r * t_cr
        if v[2] <= 1e-9:
            return None
        return np.array([intr.fx * v[0] / v[2] + intr.cx,
                         intr.fy * v[1] / v[2] + intr.cy])

    p0 = pix(rho_min)
    p1 = pix(rho_max)
    if p0 is None or p1 is None:
        return MatchResult(MatchOutcome.OFF_IMAGE)
    seg = p1 - p0
    length = float(np.linalg.norm(seg))
    if length < 0.5:
        # baseline too small for this point: keep the current estimate
        return MatchResult(MatchOutcome.DEGENERATE, rho, point.variance, 0.0)
    if length > config.search_range:
        scale = config.search_range / length
        mid = 0.5 * (p0 + p1)
        p0 = mid - 0.5 * seg * scale
        p1 = mid + 0.5 * seg * scale
        seg = p1 - p0
        length = config.search_range

    n = int(np.ceil(length)) + 1
    ts = np.linspace(0.0, 1.0, n)
    px = p0[0] + ts * seg[0]
    py = p0[1] + ts * seg[1]

    du, dv = config.pattern()
    ref_img = kf.pyramid.intensity[0]
    ref_vals = kernels.bilinear(ref_img, point.pixel[0] + du, point.pixel[1] + dv)
    scores = kernels.ssd_scores(frame_pyramid.intensity[0], px, py, du, dv,
                                np.ascontiguousarray(ref_vals))
    if not np.any(np.isfinite(scores)):
        return MatchResult(MatchOutcome.OFF_IMAGE)

    best = int(np.argmin(scores))
    best_score = scores[best]
    # ambiguity: another local minimum away from the best within ratio
    far = np.abs(np.arange(n) - best) > 2
    if np.any(far & np.isfinite(scores)):
        second = float(np.min(scores[far]))
        if (second < config.ambiguity_ratio * best_score
                or second - best_score < config.ambiguity_margin):
            return MatchResult(MatchOutcome.AMBIGUOUS)

    # parabola fit over the best triple for sub-pixel localization
    offset = 0.0
    if 0 < best < n - 1 and np.isfinite(scores[best - 1]) and np.isfinite(scores[best + 1]):
        a, b, c = scores[best - 1], scores[best], scores[best + 1]
        denom = a - 2.0 * b + c
        if denom > 1e-12:
            offset = float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
    match_px = np.array([px[best] + offset * seg[0] / (n - 1),
                         py[best] + offset * seg[1] / (n - 1)])

    rho_new = _inv_depth_at_pixel(point.pixel, match_px, R_cr, t_cr, intr)
    if rho_new is None:
        return MatchResult(MatchOutcome.DEGENERATE, rho, point.variance, 0.0)
    rho_new = float(np.clip(rho_new, rho_min, rho_max))

    # one matched pixel of uncertainty mapped through the segment geometry
    sigma_obs = (rho_max - rho_min) / length * config.match_sigma_px
    var_obs = max(sigma_obs * sigma_obs, 1e-12)
    return MatchResult(MatchOutcome.OK, rho_new, var_obs,
                       float(best_score) / len(du))


def update_depth_filter(point, match, config=None):
    """Fuse a search result into the point's Gaussian inverse-depth filter."""
    config = config or EpipolarSearchConfig()
    if match.outcome == MatchOutcome.DEGENERATE:
        return point
    if match.outcome == MatchOutcome.OFF_IMAGE:
        return point
    if match.outcome == MatchOutcome.AMBIGUOUS:
        fails = point.fail_count + 1
        if fails >= config.max_failures:
            return replace(point, status=PointStatus.OUTLIER, fail_count=fails)
        return replace(point, variance=point.variance * config.variance_inflation,
                       fail_count=fails)

    w = 1.0 / point.variance + 1.0 / match.variance
    mean = (point.inv_depth / point.variance + match.inv_depth / match.variance) / w
    var = 1.0 / w
    status = point.status
    if status == PointStatus.CANDIDATE and var < config.activation_variance:
        status = PointStatus.ACTIVE
    if mean <= 0:
        return replace(point, status=PointStatus.OUTLIER)
    return replace(point, inv_depth=mean, variance=var, status=status, fail_count=0)


@dataclass(frozen=True)
class KeyframePolicy:
    min_overlap: float = 0.6
    distance_threshold: float = 0.8     # meters, weighted
    rotation_weight: float = 0.5


def should_create_keyframe(tracking, overlap, mean_scene_depth=2.0, policy=None):
    """Keyframe when the view overlap drops or the weighted pose distance
    (translation plus rotation scaled by scene depth) exceeds the threshold."""
    policy = policy or KeyframePolicy()
    if overlap < policy.min_overlap:
        return True
    R_cr, t_cr = tracking.transform_cr()
    angle = float(np.linalg.norm(log_so3(R_cr)))
    dist = float(np.linalg.norm(t_cr)) + policy.rotation_weight * angle * mean_scene_depth
    return dist > policy.distance_threshold


def propagate_to_new_keyframe(old_kf, new_pyramid, R_nr, t_nr, new_id,
                              timestamp, state, intr, config=None,
                              refill_target=None):
    """Reproject the old keyframe's active points into a new keyframe.

    Inverse depths are transformed exactly; variances scale with
    (rho_new / rho_old)^4. Pixel collisions keep the smaller-variance point.
    Fresh candidates refill the point budget.
    """
    config = config or EpipolarSearchConfig()
    h, w = new_pyramid.shape
    kf = Keyframe(id=new_id, timestamp=timestamp, pyramid=new_pyramid, state=state)

    occupancy = {}
    for p in old_kf.active_points():
        X = ray(p.pixel, intr) / p.inv_depth
        Xn = R_nr @ X + t_nr
        if Xn[2] <= 1e-6:
            continue
        rho_new = 1.0 / Xn[2]
        u = intr.fx * Xn[0] * rho_new + intr.cx
        v = intr.fy * Xn[1] * rho_new + intr.cy
        if not (0 <= u < w - 1 and 0 <= v < h - 1):
            continue
        scale = rho_new / p.inv_depth
        # exact first-order scaling plus process noise: estimated poses make
        # successive observations correlated, so propagated variances must
        # not collapse to zero
        var_new = (p.variance * scale ** 4
                   + (config.propagation_sigma * rho_new) ** 2)
        key = (int(round(u)), int(round(v)))
        cand = CandidatePoint(np.array([u, v]), rho_new, var_new,
                              status=PointStatus.ACTIVE, host_id=new_id)
        prev = occupancy.get(key)
        if prev is None or cand.variance < prev.variance:
            occupancy[key] = cand
    kf.points = list(occupancy.values())

    target = (refill_target if refill_target is not None else config.point_budget)
    missing = target - len(kf.points)
    if missing > 0:
        taken = set(occupancy.keys())
        fresh = select_candidates(kf, missing, config)
        for c in fresh:
            key = (int(round(c.pixel[0])), int(round(c.pixel[1])))
            if key not in taken:
                taken.add(key)
                kf.points.append(c)
    kf.points = kf.points[: config.point_budget]
    return kf


def make_keyframe(pyramid, state, kf_id, timestamp, target_count,
                  config=None, bootstrap_rng=None):
    """Fresh keyframe with newly selected candidates.

    With bootstrap_rng, all candidates share one random inverse depth drawn
    from [0.5, 2] 1/m: monocular scale is unobservable before inertial fusion
    acts, and a shared draw keeps the (planar-ish) scene structure coherent.
    """
    config = config or EpipolarSearchConfig()
    kf = Keyframe(id=kf_id, timestamp=timestamp, pyramid=pyramid, state=state)
    points = select_candidates(kf, target_count, config)
    if bootstrap_rng is not None:
        rho = float(bootstrap_rng.uniform(0.5, 2.0))
        points = [replace(p, inv_depth=rho) for p in points]
    kf.points = points
    return kf
