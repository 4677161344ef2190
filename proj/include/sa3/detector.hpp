#pragma once

// Toy two-stage detector: a small strided conv backbone with shallow/deep
// taps, a single-scale RPN and a RoI detection head. Supplies the features,
// proposals and the supervised losses for source-domain images.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "sa3/geometry.hpp"
#include "sa3/params.hpp"
#include "sa3/tensor.hpp"
#include "sa3/types.hpp"

namespace sa3 {

struct DetectorConfig {
  int n_classes = 3;       // foreground classes; background is one extra column
  int n_proposals = 32;    // top-N kept after objectness ranking
  int shallow_channels = 32;
  int deep_channels = 128;
  int shallow_stride = 4;
  int deep_stride = 16;
  int anchor_size = 32;    // single scale, aspect 1:1
  int roi_size = 7;
  int det_hidden = 32;
  double fg_iou = 0.5;     // proposal/anchor labelled foreground at or above
  double bg_iou = 0.3;     // anchor labelled background at or below
};

struct DetectorParams {
  // backbone: stage 1 is two stride-2 convs (tap at stride 4, 32 channels),
  // stages 2 and 3 stride 2 each (deep tap at stride 16, 128 channels)
  Parameter c1w, c1b, c2w, c2b, c3w, c3b, c4w, c4b;
  Parameter rpn_w, rpn_b;  // 1x1 conv to objectness + 4 deltas per anchor
  Parameter fc1_w, fc1_b, cls_w, cls_b, box_w, box_b;

  DetectorParams() = default;

  explicit DetectorParams(const DetectorConfig& cfg, Lcg64& rng) {
    auto conv = [&](const char* name, int k, int ci, int co) {
      Parameter p(name, {k, k, ci, co});
      p.init_gaussian(rng, std::sqrt(2.0 / (k * k * ci)));
      return p;
    };
    auto fc = [&](const char* name, int in, int out, double stddev) {
      Parameter p(name, {in, out});
      p.init_gaussian(rng, stddev);
      return p;
    };
    const int cs = cfg.shallow_channels, cd = cfg.deep_channels;
    c1w = conv("backbone.c1.w", 3, 3, cs / 2);
    c1b = Parameter("backbone.c1.b", {cs / 2});
    c2w = conv("backbone.c2.w", 3, cs / 2, cs);
    c2b = Parameter("backbone.c2.b", {cs});
    c3w = conv("backbone.c3.w", 3, cs, cd / 2);
    c3b = Parameter("backbone.c3.b", {cd / 2});
    c4w = conv("backbone.c4.w", 3, cd / 2, cd);
    c4b = Parameter("backbone.c4.b", {cd});
    rpn_w = conv("rpn.head.w", 1, cd, 5);
    for (auto& v : rpn_w.value) v *= 0.1;  // start close to neutral proposals
    rpn_b = Parameter("rpn.head.b", {5});
    const int pooled = cfg.roi_size * cfg.roi_size * cd;
    fc1_w = fc("det.fc1.w", pooled, cfg.det_hidden, std::sqrt(2.0 / pooled));
    fc1_b = Parameter("det.fc1.b", {cfg.det_hidden});
    cls_w = fc("det.cls.w", cfg.det_hidden, cfg.n_classes + 1, 0.01);
    cls_b = Parameter("det.cls.b", {cfg.n_classes + 1});
    box_w = fc("det.box.w", cfg.det_hidden, 4, 0.01);
    box_b = Parameter("det.box.b", {4});
  }
};

inline FeaturePair backbone_forward(ParamBinding& pb, DetectorParams& p, const Tensor& image) {
  if (image.rank() != 3 || image.extent(2) != 3)
    throw std::invalid_argument("backbone_forward: expected [H,W,3] image");
  if (image.extent(0) % 16 != 0 || image.extent(1) % 16 != 0)
    throw std::invalid_argument("backbone_forward: image dimensions must be divisible by 16");
  Tensor s1 = relu(conv2d(image, pb(p.c1w), pb(p.c1b), 2));
  Tensor shallow = relu(conv2d(s1, pb(p.c2w), pb(p.c2b), 2));
  Tensor s2 = relu(conv2d(shallow, pb(p.c3w), pb(p.c3b), 2));
  Tensor deep = relu(conv2d(s2, pb(p.c4w), pb(p.c4b), 2));
  return FeaturePair{shallow, deep};
}

// One anchor per deep-feature cell, centred on the cell, in row-major order.
inline std::vector<Box> make_anchors(int hd, int wd, int stride, int size) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(hd) * wd);
  const double half = size / 2.0;
  for (int y = 0; y < hd; ++y)
    for (int x = 0; x < wd; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      anchors.push_back(Box{cx - half, cy - half, cx + half, cy + half});
    }
  return anchors;
}

// Standard box regression targets from `from` to `to`.
inline std::array<double, 4> box_deltas(const Box& from, const Box& to) {
  return {(to.cx() - from.cx()) / from.width(), (to.cy() - from.cy()) / from.height(),
          std::log(to.width() / from.width()), std::log(to.height() / from.height())};
}

// Applies (dx,dy,dw,dh) to `base` and clips the result inside the image so
// it is never degenerate. Shift deltas clamp to +-2, log-scale to +-4.
inline Box decode_box(const Box& base, double dx, double dy, double dw, double dh, int img_w,
                      int img_h) {
  dx = std::clamp(dx, -2.0, 2.0);
  dy = std::clamp(dy, -2.0, 2.0);
  dw = std::clamp(dw, -4.0, 4.0);
  dh = std::clamp(dh, -4.0, 4.0);
  double w = base.width() * std::exp(dw);
  double h = base.height() * std::exp(dh);
  w = std::clamp(w, 1.0, static_cast<double>(img_w));
  h = std::clamp(h, 1.0, static_cast<double>(img_h));
  double cx = std::clamp(base.cx() + dx * base.width(), w / 2.0, img_w - w / 2.0);
  double cy = std::clamp(base.cy() + dy * base.height(), h / 2.0, img_h - h / 2.0);
  return Box{cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0};
}

// N proposal boxes plus the tensors the detection head and I2ITM consume.
struct ProposalSet {
  std::vector<Box> boxes;       // decoded and clipped, objectness order
  Tensor objectness;            // [N] logits, non-increasing
  Tensor class_logits;          // [N, n_classes+1], filled by the detection head
  Tensor box_refinements;       // [N, 4], filled by the detection head
  std::vector<int> anchor_indices;
};

struct RpnOutput {
  Tensor obj_logits;            // [A] per-anchor objectness logits
  Tensor deltas;                // [A, 4] per-anchor box deltas
  std::vector<Box> anchors;
  ProposalSet proposals;
};

inline RpnOutput rpn_forward(ParamBinding& pb, DetectorParams& p, const DetectorConfig& cfg,
                             const Tensor& deep, int img_w, int img_h, int n_proposals) {
  if (n_proposals < 1) throw std::invalid_argument("rpn_forward: proposal count must be >= 1");
  const int hd = deep.extent(0), wd = deep.extent(1);
  Tensor head = conv2d(deep, pb(p.rpn_w), pb(p.rpn_b), 1);  // [Hd,Wd,5]
  Tensor flat = head.reshaped({hd * wd, 5});
  RpnOutput out;
  out.obj_logits = slice_cols(flat, 0, 1).reshaped({hd * wd});
  out.deltas = slice_cols(flat, 1, 5);
  out.anchors = make_anchors(hd, wd, cfg.deep_stride, cfg.anchor_size);

  const int total = hd * wd;
  const int n = std::min(n_proposals, total);
  std::vector<int> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  const auto& obj = out.obj_logits.values();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return obj[static_cast<std::size_t>(a)] > obj[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(n));

  const auto& dv = out.deltas.values();
  out.proposals.anchor_indices = order;
  out.proposals.boxes.reserve(order.size());
  for (int idx : order) {
    const double* d = dv.data() + static_cast<std::size_t>(idx) * 4;
    out.proposals.boxes.push_back(
        decode_box(out.anchors[static_cast<std::size_t>(idx)], d[0], d[1], d[2], d[3], img_w, img_h));
  }
  out.proposals.objectness = gather(out.obj_logits, order);
  return out;
}

// Pooled RoI features for every proposal, stacked into [N, S*S*C].
inline Tensor roi_features(const Tensor& feature, const std::vector<Box>& boxes, int stride,
                           int roi_size) {
  std::vector<Tensor> rows;
  rows.reserve(boxes.size());
  const int c = feature.extent(2);
  const int d = roi_size * roi_size * c;
  for (const Box& b : boxes) {
    Tensor pooled = bilinear_crop(feature, b.x1 / stride, b.y1 / stride, b.x2 / stride,
                                  b.y2 / stride, roi_size);
    rows.push_back(pooled.reshaped({d}));
  }
  return stack_rows(rows);
}

struct DetHeadOutput {
  Tensor class_logits;  // [N, n_classes+1]
  Tensor refinements;   // [N, 4]
};

// Two-layer perceptron over flattened pooled features.
inline DetHeadOutput det_head(ParamBinding& pb, DetectorParams& p, const Tensor& pooled_rows) {
  Tensor hidden = relu(add_rowvec(matmul(pooled_rows, pb(p.fc1_w)), pb(p.fc1_b)));
  return DetHeadOutput{add_rowvec(matmul(hidden, pb(p.cls_w)), pb(p.cls_b)),
                       add_rowvec(matmul(hidden, pb(p.box_w)), pb(p.box_b))};
}

// Anchor labelling: positive at IoU >= fg_iou with some GT, negative at
// <= bg_iou, ignored in between.
struct AnchorMatch {
  std::vector<int> labelled;        // anchor indices entering the objectness BCE
  std::vector<double> labels;       // 1 positive / 0 negative, aligned with `labelled`
  std::vector<int> positives;       // anchor indices with a matched GT
  std::vector<int> matched_gt;      // GT index per positive
};

inline AnchorMatch match_anchors(const std::vector<Box>& anchors,
                                 const std::vector<GTInstance>& gts, const DetectorConfig& cfg) {
  AnchorMatch m;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[a], gts[g].box);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best >= cfg.fg_iou) {
      m.labelled.push_back(static_cast<int>(a));
      m.labels.push_back(1.0);
      m.positives.push_back(static_cast<int>(a));
      m.matched_gt.push_back(best_gt);
    } else if (best <= cfg.bg_iou) {
      m.labelled.push_back(static_cast<int>(a));
      m.labels.push_back(0.0);
    }
  }
  return m;
}

// Objectness BCE over labelled anchors plus smooth-L1 on the deltas of
// positives. Source-domain images only.
inline Tensor rpn_loss(const RpnOutput& rpn, const std::vector<GTInstance>& gts, Domain domain,
                       const DetectorConfig& cfg) {
  if (domain != Domain::source)
    throw ContractViolation("rpn_loss: requires a source-domain image");
  const AnchorMatch m = match_anchors(rpn.anchors, gts, cfg);
  Tensor loss = Tensor::scalar(0.0);
  if (!m.labelled.empty())
    loss = bce_loss(sigmoid(gather(rpn.obj_logits, m.labelled)), m.labels);
  if (!m.positives.empty()) {
    std::vector<double> targets;
    targets.reserve(m.positives.size() * 4);
    for (std::size_t i = 0; i < m.positives.size(); ++i) {
      const auto t = box_deltas(rpn.anchors[static_cast<std::size_t>(m.positives[i])],
                                gts[static_cast<std::size_t>(m.matched_gt[i])].box);
      targets.insert(targets.end(), t.begin(), t.end());
    }
    loss = add(loss, smooth_l1_loss(gather_rows(rpn.deltas, m.positives), targets));
  }
  return loss;
}

// Softmax cross-entropy over n_classes+1 (background last) plus smooth-L1 on
// the refinements of foreground-matched proposals. Source-domain images only.
inline Tensor det_loss(const DetHeadOutput& head, const std::vector<Box>& proposal_boxes,
                       const std::vector<GTInstance>& gts, Domain domain,
                       const DetectorConfig& cfg) {
  if (domain != Domain::source)
    throw ContractViolation("det_loss: requires a source-domain image");
  const int n = static_cast<int>(proposal_boxes.size());
  std::vector<int> labels(static_cast<std::size_t>(n), cfg.n_classes);  // background
  std::vector<int> fg;
  std::vector<double> fg_targets;
  for (int i = 0; i < n; ++i) {
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(proposal_boxes[static_cast<std::size_t>(i)], gts[g].box);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best >= cfg.fg_iou && best_gt >= 0) {
      labels[static_cast<std::size_t>(i)] = gts[static_cast<std::size_t>(best_gt)].class_id;
      fg.push_back(i);
      const auto t = box_deltas(proposal_boxes[static_cast<std::size_t>(i)],
                                gts[static_cast<std::size_t>(best_gt)].box);
      fg_targets.insert(fg_targets.end(), t.begin(), t.end());
    }
  }
  Tensor loss = softmax_xent(head.class_logits, labels);
  if (!fg.empty())
    loss = add(loss, smooth_l1_loss(gather_rows(head.refinements, fg), fg_targets));
  return loss;
}

}  // namespace sa3
