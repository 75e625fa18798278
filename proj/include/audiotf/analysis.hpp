#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "audiotf/audio.hpp"
#include "audiotf/model.hpp"

namespace audiotf {

constexpr int kFilterLen = 400;
constexpr int kSpectrumBins = kFilterLen / 2 + 1;  // one-sided, 40 Hz per bin at 16 kHz
constexpr double kBinHz = double(kSampleRate) / kFilterLen;

struct FilterBankView {
  std::vector<std::vector<double>> filters;  // [num_filters][400]
  std::vector<std::vector<double>> spectra;  // [num_filters][201], magnitudes
  std::vector<int> peak_bin;                 // argmax of each spectrum (bin 0 included)
  std::vector<int> order;                    // permutation; identity until sorted
  bool sorted = false;
};

// One-sided magnitude of the 400-point DFT. No zero padding.
inline std::vector<double> dft_magnitude(const std::vector<double>& filter) {
  if (int(filter.size()) != kFilterLen)
    throw ContractError("dft_magnitude expects length " + std::to_string(kFilterLen));
  std::vector<double> mag(kSpectrumBins);
  const double w = 6.283185307179586476925286766559 / kFilterLen;
  for (int k = 0; k < kSpectrumBins; ++k) {
    double re = 0, im = 0;
    for (int n = 0; n < kFilterLen; ++n) {
      const double a = w * k * n;
      re += filter[size_t(n)] * std::cos(a);
      im -= filter[size_t(n)] * std::sin(a);
    }
    mag[size_t(k)] = std::sqrt(re * re + im * im);
  }
  return mag;
}

// Rows = incoming weight vectors of the first front-end layer's neurons.
template <typename T>
FilterBankView extract_filters(const AudioTransformer<T>& model) {
  const auto& layer = model.frontend_first_layer();
  const int in = layer.W.shape()[0], out = layer.W.shape()[1];
  if (in != kFilterLen)
    throw CheckpointError("front-end first layer input dim " + std::to_string(in) +
                          " is not a 25 ms patch");
  FilterBankView view;
  view.filters.assign(size_t(out), std::vector<double>(kFilterLen));
  for (int o = 0; o < out; ++o)
    for (int i = 0; i < in; ++i)
      view.filters[size_t(o)][size_t(i)] = double(layer.W.values()[size_t(i) * out + o]);
  view.spectra.reserve(size_t(out));
  view.peak_bin.reserve(size_t(out));
  for (int o = 0; o < out; ++o) {
    view.spectra.push_back(dft_magnitude(view.filters[size_t(o)]));
    const auto& s = view.spectra.back();
    view.peak_bin.push_back(int(std::max_element(s.begin(), s.end()) - s.begin()));
  }
  view.order.resize(size_t(out));
  std::iota(view.order.begin(), view.order.end(), 0);
  return view;
}

// Stable sort by peak bin; equal peaks keep their original order, producing
// the step-wise layout of filters sharing a frequency bin.
inline FilterBankView sort_by_peak(FilterBankView view) {
  std::stable_sort(view.order.begin(), view.order.end(), [&](int a, int b) {
    return view.peak_bin[size_t(a)] < view.peak_bin[size_t(b)];
  });
  view.sorted = true;
  return view;
}

inline double filter_energy(const std::vector<double>& f) {
  double e = 0;
  for (double v : f) e += v * v;
  return e;
}

namespace analysis_detail {

inline void put(std::ostream& os, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  os << buf;
}

}  // namespace analysis_detail

// Writes filters_sorted.csv, spectra_sorted.csv, spectra_sorted_norm.csv
// (per-row max normalization) and peaks.csv into out_dir.
inline void export_analysis(const FilterBankView& view, const std::string& out_dir) {
  auto open = [&](const std::string& name) {
    std::ofstream os(out_dir + "/" + name);
    if (!os) throw Error("cannot write " + out_dir + "/" + name);
    return os;
  };
  {
    auto os = open("filters_sorted.csv");
    os << "rank,original_index,peak_hz";
    for (int i = 0; i < kFilterLen; ++i) os << ",tap" << i;
    os << "\n";
    for (size_t r = 0; r < view.order.size(); ++r) {
      const int o = view.order[r];
      os << r << "," << o << ",";
      analysis_detail::put(os, view.peak_bin[size_t(o)] * kBinHz);
      for (double v : view.filters[size_t(o)]) {
        os << ",";
        analysis_detail::put(os, v);
      }
      os << "\n";
    }
  }
  for (const bool normalized : {false, true}) {
    auto os = open(normalized ? "spectra_sorted_norm.csv" : "spectra_sorted.csv");
    os << "rank,original_index";
    for (int k = 0; k < kSpectrumBins; ++k) os << ",bin" << k;
    os << "\n";
    for (size_t r = 0; r < view.order.size(); ++r) {
      const int o = view.order[r];
      const auto& s = view.spectra[size_t(o)];
      const double scale = normalized ? std::max(*std::max_element(s.begin(), s.end()), 1e-300) : 1.0;
      os << r << "," << o;
      for (double v : s) {
        os << ",";
        analysis_detail::put(os, v / scale);
      }
      os << "\n";
    }
  }
  {
    auto os = open("peaks.csv");
    os << "rank,original_index,peak_bin,peak_hz,energy\n";
    for (size_t r = 0; r < view.order.size(); ++r) {
      const int o = view.order[r];
      os << r << "," << o << "," << view.peak_bin[size_t(o)] << ",";
      analysis_detail::put(os, view.peak_bin[size_t(o)] * kBinHz);
      os << ",";
      analysis_detail::put(os, filter_energy(view.filters[size_t(o)]));
      os << "\n";
    }
  }
}

}  // namespace audiotf
