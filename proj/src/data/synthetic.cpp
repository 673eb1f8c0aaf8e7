#include "qgvr/data/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>

namespace qgvr::data {

namespace {

const std::vector<std::string> kNumbers = {"one", "two",  "three",  "four",     "five",    "six",
                                           "seven", "eight", "nine", "ten", "eleven", "twelve"};
const std::vector<std::string> kVerbs = {"holding", "opening", "washing", "reading", "eating",  "folding",
                                         "throwing", "carrying", "cutting", "pushing", "painting", "cleaning"};
const std::vector<std::string> kObjects = {"cup",   "door",  "dish",  "book",  "apple", "towel",
                                           "ball",  "box",   "bread", "chair", "wall",  "table"};

double uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::vector<double> random_vector(std::size_t dim, double scale, std::mt19937_64& rng) {
  std::vector<double> v(dim);
  for (auto& x : v) x = scale * (2.0 * uniform(rng) - 1.0);
  return v;
}

struct Phrase {
  std::string question;
  std::string answer;
};

Phrase single_question(std::size_t tmpl, std::size_t segment, std::size_t pattern) {
  const auto& k = segment_word(segment);
  const auto& v = kVerbs[pattern];
  const auto& o = kObjects[pattern];
  switch (tmpl % 3) {
    case 0:
      return {"What happens in segment " + k + "?", "The person is " + v + " the " + o + "."};
    case 1:
      return {"What is the person doing during segment " + k + "?", "He is " + v + " a " + o + "."};
    default:
      return {"In segment " + k + ", what does the person do?", "The person is " + v + " the " + o + "."};
  }
}

Phrase double_question(std::size_t s1, std::size_t s2, std::size_t p1, std::size_t p2) {
  return {"What happens in segment " + segment_word(s1) + " and segment " + segment_word(s2) + "?",
          "The person is " + kVerbs[p1] + " the " + kObjects[p1] + " and then " + kVerbs[p2] + " the " + kObjects[p2] +
              "."};
}

FrameRange segment_range(const SyntheticSpec& spec, std::size_t segment) {
  const std::size_t len = spec.frames / spec.segments;
  return {segment * len, (segment + 1) * len};
}

}  // namespace

const std::string& segment_word(std::size_t segment) {
  if (segment >= kNumbers.size()) throw std::out_of_range("no word for segment " + std::to_string(segment));
  return kNumbers[segment];
}

void SyntheticSpec::validate() const {
  if (num_videos == 0 || turns == 0) throw std::invalid_argument("synthetic spec needs videos and turns");
  if (segments < 2 || segments > kNumbers.size()) throw std::invalid_argument("segments must be in [2, 12]");
  if (frames % segments != 0) throw std::invalid_argument("frames must be a multiple of segments");
  if (patterns < segments || patterns > kVerbs.size()) {
    throw std::invalid_argument("patterns must be at least the segment count and at most 12");
  }
  if (feature_dim == 0) throw std::invalid_argument("feature_dim must be positive");
  if (two_segment_fraction < 0.0 || two_segment_fraction > 1.0) {
    throw std::invalid_argument("two_segment_fraction must lie in [0, 1]");
  }
  if (noise < 0.0) throw std::invalid_argument("noise must be non-negative");
}

FeatureStore SyntheticCorpus::store() const {
  FeatureStore s;
  for (const auto& [id, f] : features) s.add(id, f);
  return s;
}

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticCorpus corpus;
  corpus.spec = spec;

  std::vector<std::vector<double>> markers, patterns;
  for (std::size_t j = 0; j < spec.segments; ++j) markers.push_back(random_vector(spec.feature_dim, spec.marker_scale, rng));
  for (std::size_t p = 0; p < spec.patterns; ++p) patterns.push_back(random_vector(spec.feature_dim, spec.pattern_scale, rng));

  const std::size_t seg_len = spec.frames / spec.segments;
  for (std::size_t v = 0; v < spec.num_videos; ++v) {
    const std::string id = "synth" + std::to_string(v);
    // The first turn's queried segment and answer cycle through every
    // (segment, pattern) pair, so each segment's answers are balanced.
    const std::size_t queried = v % spec.segments;
    const std::size_t answer = (v / spec.segments) % spec.patterns;
    std::vector<std::size_t> perm(spec.patterns);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::swap(perm[queried], *std::find(perm.begin(), perm.end(), answer));
    perm.resize(spec.segments);  // one distinct pattern per segment

    std::vector<double> noise(spec.frames * spec.feature_dim);
    for (auto& x : noise) x = spec.noise * (2.0 * uniform(rng) - 1.0);
    for (std::size_t d = 0; d < spec.feature_dim; ++d) {
      double m = 0.0;
      for (std::size_t l = 0; l < spec.frames; ++l) m += noise[l * spec.feature_dim + d];
      m /= static_cast<double>(spec.frames);
      for (std::size_t l = 0; l < spec.frames; ++l) noise[l * spec.feature_dim + d] -= m;
    }
    FrameFeatures f{spec.frames, spec.feature_dim, std::vector<float>(spec.frames * spec.feature_dim)};
    for (std::size_t l = 0; l < spec.frames; ++l) {
      const std::size_t j = l / seg_len;
      for (std::size_t d = 0; d < spec.feature_dim; ++d) {
        f.values[l * spec.feature_dim + d] =
            static_cast<float>(markers[j][d] + patterns[perm[j]][d] + noise[l * spec.feature_dim + d]);
      }
    }

    DialogueExample ex;
    ex.video_id = id;
    for (std::size_t t = 0; t < spec.turns; ++t) {
      const std::size_t seg = (queried + 3 * t) % spec.segments;
      Turn turn;
      if (uniform(rng) < spec.two_segment_fraction) {
        std::size_t other = (seg + 1 + rng() % (spec.segments - 1)) % spec.segments;
        const std::size_t s1 = std::min(seg, other), s2 = std::max(seg, other);
        auto p = double_question(s1, s2, perm[s1], perm[s2]);
        turn = {p.question, p.answer, {segment_range(spec, s1), segment_range(spec, s2)}};
      } else {
        auto p = single_question(rng() % 3, seg, perm[seg]);
        turn = {p.question, p.answer, {segment_range(spec, seg)}};
      }
      ex.turns.push_back(std::move(turn));
    }
    corpus.dialogues.push_back(std::move(ex));
    corpus.features[id] = std::move(f);
    corpus.layout[id] = perm;
  }
  return corpus;
}

void save_synthetic(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
  save_avsd(dir / "dialogs.json", corpus.dialogues);
  for (const auto& [id, f] : corpus.features) write_features(dir / "features", id, f);
}

}  // namespace qgvr::data
