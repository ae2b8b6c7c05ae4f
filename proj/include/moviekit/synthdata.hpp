#pragma once

#include <string>
#include <utility>
#include <vector>

#include "moviekit/rng.hpp"
#include "moviekit/tensor.hpp"
#include "moviekit/videoedit.hpp"

namespace moviekit {

// Procedural edit triplets standing in for a real instruction-editing corpus.
// The generator is its own ground truth: edited == apply_instruction(source).
struct EditTriplet {
    Tensor source;  // {3,H,W} in [0,1]
    int instruction_id = 0;
    Tensor edited;
};

struct InstructionVocab {
    struct Entry {
        int id;
        std::string name;
    };
    std::vector<Entry> entries;  // id 0 reserved as NULL

    int size() const { return static_cast<int>(entries.size()); }
    const Entry& by_id(int id) const;
};

constexpr int kNullInstruction = 0;
constexpr int kTokenSeqLen = 4;
constexpr int kTokenDim = 16;
constexpr int kImageSize = 64;

const InstructionVocab& default_vocab();

Tensor apply_instruction(const Tensor& image, int instruction_id);

// instruction_id < 0 samples a non-null id from the vocabulary.
EditTriplet gen_triplet(Rng& rng, int instruction_id = -1, int size = kImageSize);

// (source clip, edited clip) of shapes translating smoothly across frames.
std::pair<VideoClip, VideoClip> gen_video(Rng& rng, int n_frames, int instruction_id,
                                          int size = kImageSize);

// Length-4 token embedding sequence {kTokenSeqLen, kTokenDim} from a fixed
// seeded table; id 0 maps to the designated null sequence.
Tensor encode_instruction(int instruction_id);

}  // namespace moviekit
