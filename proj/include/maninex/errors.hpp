#pragma once

#include <stdexcept>
#include <string>

namespace maninex {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can catch one type and still report the specific kind.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "Error"; }
};

#define MANINEX_DEFINE_ERROR(Name)                                        \
    class Name : public Error {                                           \
    public:                                                               \
        using Error::Error;                                               \
        const char* kind() const noexcept override { return #Name; }      \
    }

// manifest
MANINEX_DEFINE_ERROR(UnknownOption);
MANINEX_DEFINE_ERROR(ExclusivityViolation);
MANINEX_DEFINE_ERROR(LengthMismatch);
MANINEX_DEFINE_ERROR(ParseError);
MANINEX_DEFINE_ERROR(SchemaError);
MANINEX_DEFINE_ERROR(IoError);

// hamming_index
MANINEX_DEFINE_ERROR(VersionMismatch);
MANINEX_DEFINE_ERROR(UnknownAnchor);

// negsampler
MANINEX_DEFINE_ERROR(DegenerateSupport);
MANINEX_DEFINE_ERROR(ExhaustedCandidates);
MANINEX_DEFINE_ERROR(SizeExceedsDataset);

// contrastive
MANINEX_DEFINE_ERROR(ZeroNorm);
MANINEX_DEFINE_ERROR(UnpairedInstance);
MANINEX_DEFINE_ERROR(MissingModality);

// toytrain
MANINEX_DEFINE_ERROR(DivergedLoss);
MANINEX_DEFINE_ERROR(SingleClassSplit);

MANINEX_DEFINE_ERROR(InvalidArgument);

#undef MANINEX_DEFINE_ERROR

}  // namespace maninex
