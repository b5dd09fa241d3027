#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cycledm/datasets/dataset.hpp"
#include "cycledm/evaluation/features.hpp"

namespace cycledm::evaluation {

inline constexpr double kCovarianceRidge = 1e-6;

// Frechet distance between Gaussian fits (1/(N-1) covariances, ridge added
// before the matrix square root). Warnings such as N <= d go to `warnings`.
double compute_fid(const FeatureSet& real, const FeatureSet& gen, std::vector<std::string>* warnings = nullptr);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  bool degenerate = false;  // a set whose k-NN radii are all zero
};

// k-NN manifold precision and recall. A point is covered when it lies within
// the distance from some point of the other set to that point's k-th nearest
// neighbour in its own set.
PrecisionRecall knn_precision_recall(const FeatureSet& real, const FeatureSet& gen, int k = 3);

// Class of the pixel-L1 nearest reference image for every query; ties go to
// the lowest reference index.
std::vector<int> nn_classify(const ImageBatch& queries, const datasets::DomainDataset& reference);
double nn_classify_accuracy(const ImageBatch& queries, const datasets::DomainDataset& reference);

struct OcrGain {
  double baseline_accuracy = 0.0;   // HW test vs HW train
  double converted_accuracy = 0.0;  // converted HW test vs MP train
};

using BatchConverter = std::function<ImageBatch(const ImageBatch&)>;

OcrGain ocr_gain_experiment(const datasets::DomainDataset& hw_test, const datasets::DomainDataset& hw_train,
                            const datasets::DomainDataset& mp_train, const BatchConverter& converter);

// Mean absolute pixel difference between two equally shaped batches.
double mean_pixel_l1(const ImageBatch& a, const ImageBatch& b);

}  // namespace cycledm::evaluation
