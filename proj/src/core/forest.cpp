#include "core/forest.hpp"

#include <algorithm>
#include <cmath>

#include "core/errors.hpp"
#include "core/rng.hpp"

namespace mf {

namespace {

struct SplitChoice {
    int feature = -1;
    double threshold = 0.0;
    double impurity = 1e300;
};

double gini(long long pos, long long total) {
    if (total == 0) return 0.0;
    double p = static_cast<double>(pos) / total;
    return 2.0 * p * (1.0 - p);
}

}  // namespace

void RandomForest::fit(const std::vector<std::vector<double>>& x, const std::vector<int>& labels,
                       const Options& options) {
    if (x.empty()) throw DataError("random forest: empty training set");
    int dim = static_cast<int>(x[0].size());
    int n = static_cast<int>(x.size());
    int features_per_split = std::max(1, static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim)))));

    trees_.clear();
    Rng forest_rng(options.seed ^ 0x464f52);

    for (int t = 0; t < options.n_trees; ++t) {
        Rng rng = forest_rng.fork(static_cast<std::uint64_t>(t));
        std::vector<int> sample(n);
        for (int i = 0; i < n; ++i) sample[i] = rng.uniform_int(n);

        Tree tree;
        // Iterative construction; each frame owns its sample indices.
        struct Frame {
            std::vector<int> idx;
            int node = 0;
            int depth = 0;
        };
        tree.push_back({});
        std::vector<Frame> stack;
        stack.push_back({sample, 0, 0});

        while (!stack.empty()) {
            Frame frame = std::move(stack.back());
            stack.pop_back();
            Node& node = tree[frame.node];

            long long pos = 0;
            for (int i : frame.idx) pos += labels[i];
            node.positive_fraction = frame.idx.empty()
                                         ? 0.5
                                         : static_cast<double>(pos) / static_cast<double>(frame.idx.size());
            bool pure = pos == 0 || pos == static_cast<long long>(frame.idx.size());
            if (pure || frame.depth >= options.max_depth ||
                static_cast<int>(frame.idx.size()) < options.min_samples_split) {
                continue;  // stays a leaf
            }

            // Candidate features without replacement.
            std::vector<int> feats(dim);
            for (int f = 0; f < dim; ++f) feats[f] = f;
            rng.shuffle(feats);
            feats.resize(features_per_split);
            std::sort(feats.begin(), feats.end());

            SplitChoice best;
            std::vector<std::pair<double, int>> values(frame.idx.size());
            for (int f : feats) {
                for (std::size_t i = 0; i < frame.idx.size(); ++i) {
                    values[i] = {x[frame.idx[i]][f], labels[frame.idx[i]]};
                }
                std::sort(values.begin(), values.end());
                long long left_pos = 0, left_n = 0;
                long long total = static_cast<long long>(values.size());
                for (std::size_t i = 0; i + 1 < values.size(); ++i) {
                    left_pos += values[i].second;
                    ++left_n;
                    if (values[i].first == values[i + 1].first) continue;
                    long long right_n = total - left_n;
                    double imp = (left_n * gini(left_pos, left_n) + right_n * gini(pos - left_pos, right_n)) /
                                 static_cast<double>(total);
                    if (imp < best.impurity) {
                        best.impurity = imp;
                        best.feature = f;
                        best.threshold = 0.5 * (values[i].first + values[i + 1].first);
                    }
                }
            }
            if (best.feature < 0) continue;

            std::vector<int> left_idx, right_idx;
            for (int i : frame.idx) {
                (x[i][best.feature] <= best.threshold ? left_idx : right_idx).push_back(i);
            }
            if (left_idx.empty() || right_idx.empty()) continue;

            int left_node = static_cast<int>(tree.size());
            tree.push_back({});
            int right_node = static_cast<int>(tree.size());
            tree.push_back({});
            tree[frame.node].feature = best.feature;
            tree[frame.node].threshold = best.threshold;
            tree[frame.node].left = left_node;
            tree[frame.node].right = right_node;
            stack.push_back({std::move(right_idx), right_node, frame.depth + 1});
            stack.push_back({std::move(left_idx), left_node, frame.depth + 1});
        }
        trees_.push_back(std::move(tree));
    }
}

double RandomForest::predict_probability(const std::vector<double>& x) const {
    if (trees_.empty()) throw DataError("random forest is not trained");
    double acc = 0.0;
    for (const Tree& tree : trees_) {
        int node = 0;
        while (tree[node].feature >= 0) {
            node = x[tree[node].feature] <= tree[node].threshold ? tree[node].left : tree[node].right;
        }
        acc += tree[node].positive_fraction;
    }
    return acc / static_cast<double>(trees_.size());
}

std::vector<double> RandomForest::pack() const {
    std::vector<double> blob;
    blob.push_back(static_cast<double>(trees_.size()));
    for (const Tree& tree : trees_) {
        blob.push_back(static_cast<double>(tree.size()));
        for (const Node& n : tree) {
            blob.push_back(static_cast<double>(n.feature));
            blob.push_back(n.threshold);
            blob.push_back(static_cast<double>(n.left));
            blob.push_back(static_cast<double>(n.right));
            blob.push_back(n.positive_fraction);
        }
    }
    return blob;
}

RandomForest RandomForest::unpack(const std::vector<double>& blob) {
    RandomForest rf;
    std::size_t pos = 0;
    auto next = [&]() {
        if (pos >= blob.size()) throw DataError("malformed forest blob");
        return blob[pos++];
    };
    auto n_trees = static_cast<std::size_t>(next());
    for (std::size_t t = 0; t < n_trees; ++t) {
        auto n_nodes = static_cast<std::size_t>(next());
        Tree tree(n_nodes);
        for (auto& node : tree) {
            node.feature = static_cast<int>(next());
            node.threshold = next();
            node.left = static_cast<int>(next());
            node.right = static_cast<int>(next());
            node.positive_fraction = next();
        }
        rf.trees_.push_back(std::move(tree));
    }
    return rf;
}

}  // namespace mf
