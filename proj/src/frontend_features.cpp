#include <algorithm>
#include <cmath>
#include <set>

#include "liom/frontend.hpp"

namespace liom::frontend {

namespace {

double wrap_pi(double a) {
    while (a > M_PI) a -= 2.0 * M_PI;
    while (a <= -M_PI) a += 2.0 * M_PI;
    return a;
}

}  // namespace

std::vector<LidarFrame> assemble_frames(const std::vector<LidarPoint>& stream,
                                        double sweep_deg) {
    if (stream.empty()) throw EmptyStream("empty lidar stream");
    const double sweep = sweep_deg * M_PI / 180.0;
    const double turn = 2.0 * M_PI;

    // Unwrapped azimuth relative to the stream start.
    std::vector<double> az(stream.size());
    double prev_raw = std::atan2(stream[0].xyz.y(), stream[0].xyz.x());
    double acc = 0.0;
    for (size_t i = 0; i < stream.size(); ++i) {
        const double raw = std::atan2(stream[i].xyz.y(), stream[i].xyz.x());
        acc += wrap_pi(raw - prev_raw);
        prev_raw = raw;
        az[i] = acc;
    }
    const bool reversed = az.back() < 0.0;
    if (reversed) {
        for (auto& a : az) a = -a;
    }

    const int n_frames = static_cast<int>(std::floor(az.back() / turn)) + 1;
    std::vector<LidarFrame> frames(std::max(1, n_frames));
    for (size_t i = 0; i < frames.size(); ++i) {
        frames[i].id = static_cast<int>(i);
        frames[i].sweep_deg = sweep_deg;
    }

    int max_ring = 0;
    for (size_t i = 0; i < stream.size(); ++i) {
        max_ring = std::max(max_ring, stream[i].ring);
        const int first = std::max(0, static_cast<int>(std::floor((az[i] - sweep) / turn)) + 1);
        const int last = std::min(n_frames - 1, static_cast<int>(std::floor(az[i] / turn)));
        for (int m = first; m <= last; ++m) {
            if (az[i] < m * turn || az[i] >= m * turn + sweep) continue;
            LidarPoint p = stream[i];
            p.azimuth = az[i];
            frames[m].points.push_back(p);
            frames[m].source_index.push_back(static_cast<int64_t>(i));
        }
    }

    const double az_end = az.back();
    int frame_idx = -1;
    for (auto& f : frames) {
        ++frame_idx;
        if (f.points.empty()) {
            f.complete = false;
            continue;
        }
        f.tau = f.points.front().t;
        f.t_end = f.points.back().t;
        // Complete when the stream kept sweeping past the frame's window.
        f.complete = az_end >= frame_idx * turn + sweep - 1e-9;
        f.channels.assign(max_ring + 1, {});
        for (size_t i = 0; i < f.points.size(); ++i) {
            f.channels[f.points[i].ring].push_back(static_cast<int>(i));
        }
    }
    return frames;
}

DeskewedFrame make_deskewed(const LidarFrame& frame, std::vector<Vec3> pts) {
    DeskewedFrame d;
    d.pts = std::move(pts);
    d.range.resize(d.pts.size());
    d.azimuth.resize(d.pts.size());
    for (size_t i = 0; i < d.pts.size(); ++i) {
        d.range[i] = d.pts[i].norm();
        const double raw = std::atan2(d.pts[i].y(), d.pts[i].x());
        // Re-anchor on the raw sweep azimuth: deskewing moves points only
        // slightly, so pick the unwrapped value nearest the raw one.
        const double k = std::round((frame.points[i].azimuth - raw) / (2.0 * M_PI));
        d.azimuth[i] = raw + 2.0 * M_PI * k;
    }
    return d;
}

namespace {

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double mean_err = 0.0;
    double max_err = 0.0;
};

LineFit fit_line(std::span<const double> xs, std::span<const double> ys) {
    const int n = static_cast<int>(xs.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (int i = 0; i < n; ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    LineFit f;
    const double det = n * sxx - sx * sx;
    if (std::abs(det) < 1e-15) {
        // Degenerate abscissas; treat as a beam-aligned wall.
        f.slope = 0.0;
        f.intercept = sy / n;
    } else {
        f.slope = (n * sxy - sx * sy) / det;
        f.intercept = (sy * sxx - sx * sxy) / det;
    }
    for (int i = 0; i < n; ++i) {
        const double e = std::abs(ys[i] - f.intercept - f.slope * xs[i]);
        f.mean_err += e;
        f.max_err = std::max(f.max_err, e);
    }
    f.mean_err /= n;
    return f;
}

Eigen::Vector2d unit_dir(double slope) {
    const double s = std::sqrt(1.0 + slope * slope);
    return Eigen::Vector2d(1.0 / s, slope / s);
}

}  // namespace

ScoredPoint score_point_seq(std::span<const double> ranges,
                            std::span<const double> azimuths, int i,
                            const FrontendConfig& cfg) {
    ScoredPoint out;
    const int d = cfg.neighborhood;
    const int n = static_cast<int>(ranges.size());
    if (i < d || i + d >= n) return out;  // no full neighbourhood

    // Local plane coordinates around the point's azimuth.
    std::vector<double> x(2 * d + 1), y(2 * d + 1);
    for (int k = -d; k <= d; ++k) {
        const double da = azimuths[i + k] - azimuths[i];
        x[k + d] = ranges[i + k] * std::sin(da);
        y[k + d] = ranges[i + k] * std::cos(da);
    }

    auto xs = [&](int lo, int hi) {
        return std::span<const double>(x.data() + lo + d, hi - lo + 1);
    };
    auto ys = [&](int lo, int hi) {
        return std::span<const double>(y.data() + lo + d, hi - lo + 1);
    };

    LineFit left = fit_line(xs(-d, 0), ys(-d, 0));
    LineFit right = fit_line(xs(0, d), ys(0, d));
    auto ok = [&](const LineFit& f) {
        return f.mean_err < cfg.mean_err_th && f.max_err < cfg.max_err_th;
    };
    // Predicted range of the fitted line at the previous point's abscissa,
    // against the range of the point under test.
    auto occluded = [&](const LineFit& f) {
        return f.slope * x[d - 1] + f.intercept < ranges[i];
    };

    const bool left_ok = ok(left);
    const bool right_ok = ok(right);
    bool accept = false;
    if (left_ok && right_ok) {
        accept = true;
    } else if (!left_ok && !right_ok) {
        accept = false;
    } else if (left_ok) {
        LineFit r2 = fit_line(xs(1, d), ys(1, d));
        if (ok(r2) && !occluded(r2)) {
            right = r2;
            right.slope = (y[d + 1] - y[d]) / (x[d + 1] - x[d]);
            accept = true;
        }
    } else {
        LineFit l2 = fit_line(xs(-d, -1), ys(-d, -1));
        if (ok(l2) && !occluded(l2)) {
            left = l2;
            left.slope = (y[d] - y[d - 1]) / (x[d] - x[d - 1]);
            accept = true;
        }
    }
    if (!accept) return out;

    out.accepted = true;
    out.patch.slope_left = left.slope;
    out.patch.intercept_left = left.intercept;
    out.patch.mean_err_left = left.mean_err;
    out.patch.max_err_left = left.max_err;
    out.patch.slope_right = right.slope;
    out.patch.intercept_right = right.intercept;
    out.patch.mean_err_right = right.mean_err;
    out.patch.max_err_right = right.max_err;
    out.patch.dir_left = unit_dir(left.slope);
    out.patch.dir_right = unit_dir(right.slope);
    out.patch.score = out.patch.dir_left.dot(out.patch.dir_right);
    return out;
}

namespace {

struct Candidate {
    int point = -1;    // frame point index
    double score = 0.0;
    double slope_left = 0.0, slope_right = 0.0;
};

struct BinWork {
    std::vector<Candidate> scored;  // all accepted candidates of the bin
};

int bin_of(const LidarFrame& frame, double azimuth, int nbins) {
    const double a0 = frame.points.front().azimuth;
    const double span = frame.sweep_deg * M_PI / 180.0;
    int b = static_cast<int>((azimuth - a0) / span * nbins);
    return std::clamp(b, 0, nbins - 1);
}

// Selection shared by first extraction and recheck: fills the bins'
// selected/candidate lists from the provided scored candidates.
void select_bins(const std::vector<std::vector<Candidate>>& planar_by_bin,
                 const std::vector<std::vector<Candidate>>& edge_by_bin,
                 const FrontendConfig& cfg, FeatureSet* out) {
    const size_t nb = planar_by_bin.size();
    out->planar_bins.assign(nb, {});
    out->edge_bins.assign(nb, {});

    for (size_t b = 0; b < nb; ++b) {
        // Planar: highest score first.
        std::vector<Candidate> p = planar_by_bin[b];
        std::sort(p.begin(), p.end(), [](const Candidate& a, const Candidate& c) {
            if (a.score != c.score) return a.score > c.score;
            return a.point < c.point;
        });
        auto& pb = out->planar_bins[b];
        for (const auto& c : p) {
            if (static_cast<int>(pb.selected.size()) < cfg.planar_per_bin &&
                c.score >= cfg.planar_score_min) {
                pb.selected.push_back(c.point);
                out->planar.push_back(c.point);
                out->planar_scores.push_back(c.score);
            } else if (static_cast<int>(pb.candidates.size()) < cfg.planar_per_bin) {
                pb.candidates.push_back(c.point);
            }
            if (static_cast<int>(pb.selected.size()) >= cfg.planar_per_bin &&
                static_cast<int>(pb.candidates.size()) >= cfg.planar_per_bin) {
                break;
            }
        }

        // Edges: lowest score first.
        std::vector<Candidate> e = edge_by_bin[b];
        std::sort(e.begin(), e.end(), [](const Candidate& a, const Candidate& c) {
            if (a.score != c.score) return a.score < c.score;
            return a.point < c.point;
        });
        auto& eb = out->edge_bins[b];
        for (const auto& c : e) {
            if (static_cast<int>(eb.selected.size()) < cfg.edge_per_bin &&
                c.score <= cfg.edge_score_max) {
                eb.selected.push_back(c.point);
                if (c.slope_right - c.slope_left > 0.0) {
                    out->edge_in.push_back(c.point);
                } else {
                    out->edge_out.push_back(c.point);
                }
            } else if (static_cast<int>(eb.candidates.size()) < cfg.edge_per_bin) {
                eb.candidates.push_back(c.point);
            }
            if (static_cast<int>(eb.selected.size()) >= cfg.edge_per_bin &&
                static_cast<int>(eb.candidates.size()) >= cfg.edge_per_bin) {
                break;
            }
        }
    }
}

void score_into_bins(const LidarFrame& frame, const DeskewedFrame& dsk,
                     const FrontendConfig& cfg, const std::vector<int>& subset,
                     std::vector<std::vector<Candidate>>* planar_by_bin,
                     std::vector<std::vector<Candidate>>* edge_by_bin) {
    const int nbins = cfg.bins_per_channel;
    const size_t total_bins = frame.channels.size() * nbins;
    planar_by_bin->assign(total_bins, {});
    edge_by_bin->assign(total_bins, {});

    // Position of each frame point inside its channel sequence.
    std::vector<int> pos_in_channel(frame.points.size(), -1);
    for (const auto& ch : frame.channels) {
        for (size_t k = 0; k < ch.size(); ++k) pos_in_channel[ch[k]] = static_cast<int>(k);
    }

    std::vector<double> rng, azm;
    auto score_one = [&](int pt_idx) {
        const int ring = frame.points[pt_idx].ring;
        const auto& ch = frame.channels[ring];
        const int pos = pos_in_channel[pt_idx];
        rng.resize(ch.size());
        azm.resize(ch.size());
        for (size_t k = 0; k < ch.size(); ++k) {
            rng[k] = dsk.range[ch[k]];
            azm[k] = dsk.azimuth[ch[k]];
        }
        const ScoredPoint sp = score_point_seq(rng, azm, pos, cfg);
        if (!sp.accepted) return;

        Candidate c;
        c.point = pt_idx;
        c.score = sp.patch.score;
        c.slope_left = sp.patch.slope_left;
        c.slope_right = sp.patch.slope_right;
        const int b = ring * nbins + bin_of(frame, dsk.azimuth[pt_idx], nbins);

        const double beam_l = std::abs(sp.patch.dir_left.y());
        const double beam_r = std::abs(sp.patch.dir_right.y());
        if (beam_l <= cfg.parallel_beam_cos_max && beam_r <= cfg.parallel_beam_cos_max) {
            (*planar_by_bin)[b].push_back(c);
        }
        (*edge_by_bin)[b].push_back(c);
    };

    if (subset.empty()) {
        // Channel-ordered full pass; channel sequences are loaded once.
        for (size_t ring = 0; ring < frame.channels.size(); ++ring) {
            const auto& ch = frame.channels[ring];
            if (ch.empty()) continue;
            rng.resize(ch.size());
            azm.resize(ch.size());
            for (size_t k = 0; k < ch.size(); ++k) {
                rng[k] = dsk.range[ch[k]];
                azm[k] = dsk.azimuth[ch[k]];
            }
            for (size_t k = 0; k < ch.size(); ++k) {
                const ScoredPoint sp = score_point_seq(rng, azm, static_cast<int>(k), cfg);
                if (!sp.accepted) continue;
                Candidate c;
                c.point = ch[k];
                c.score = sp.patch.score;
                c.slope_left = sp.patch.slope_left;
                c.slope_right = sp.patch.slope_right;
                const int b = static_cast<int>(ring) * nbins +
                              bin_of(frame, dsk.azimuth[ch[k]], nbins);
                const double beam_l = std::abs(sp.patch.dir_left.y());
                const double beam_r = std::abs(sp.patch.dir_right.y());
                if (beam_l <= cfg.parallel_beam_cos_max &&
                    beam_r <= cfg.parallel_beam_cos_max) {
                    (*planar_by_bin)[b].push_back(c);
                }
                (*edge_by_bin)[b].push_back(c);
            }
        }
    } else {
        for (int idx : subset) score_one(idx);
    }
}

}  // namespace

FeatureSet extract_features(const LidarFrame& frame, const DeskewedFrame& dsk,
                            const FrontendConfig& cfg) {
    std::vector<std::vector<Candidate>> planar_by_bin, edge_by_bin;
    score_into_bins(frame, dsk, cfg, {}, &planar_by_bin, &edge_by_bin);
    FeatureSet out;
    select_bins(planar_by_bin, edge_by_bin, cfg, &out);
    return out;
}

RecheckResult recheck_features(const LidarFrame& frame, const DeskewedFrame& dsk,
                               const FeatureSet& previous,
                               const FrontendConfig& cfg) {
    RecheckResult res;

    // Rescore only B u C of the previous extraction.
    std::vector<int> subset;
    auto add_bin = [&subset](const FeatureSet::Bin& b) {
        subset.insert(subset.end(), b.selected.begin(), b.selected.end());
        subset.insert(subset.end(), b.candidates.begin(), b.candidates.end());
    };
    for (const auto& b : previous.planar_bins) add_bin(b);
    for (const auto& b : previous.edge_bins) add_bin(b);
    std::sort(subset.begin(), subset.end());
    subset.erase(std::unique(subset.begin(), subset.end()), subset.end());

    std::vector<std::vector<Candidate>> planar_by_bin, edge_by_bin;
    score_into_bins(frame, dsk, cfg, subset, &planar_by_bin, &edge_by_bin);
    FeatureSet reselected;
    select_bins(planar_by_bin, edge_by_bin, cfg, &reselected);

    auto selected_union = [](const FeatureSet& f) {
        std::set<int> s;
        s.insert(f.planar.begin(), f.planar.end());
        s.insert(f.edge_in.begin(), f.edge_in.end());
        s.insert(f.edge_out.begin(), f.edge_out.end());
        return s;
    };
    const std::set<int> old_set = selected_union(previous);
    const std::set<int> new_set = selected_union(reselected);
    size_t inter = 0;
    for (int v : new_set) inter += old_set.count(v);
    res.theta = old_set.empty() ? 0.0
                                : static_cast<double>(inter) /
                                      static_cast<double>(old_set.size());

    if (res.theta >= cfg.theta_keep) {
        res.features = previous;
        res.recomputed = false;
    } else {
        res.features = extract_features(frame, dsk, cfg);
        res.recomputed = true;
    }
    return res;
}

}  // namespace liom::frontend
