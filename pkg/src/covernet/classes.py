"""The 32 top-level book-store categories.

Ids 0-29 are the experiment genres in report order; 30 and 31 are the two
categories too small for the balanced 1,900-per-class protocol.
"""

GENRES = (
    "Arts & Photography",
    "Biographies & Memoirs",
    "Business & Money",
    "Calendars",
    "Children's Books",
    "Comics & Graphic Novels",
    "Computers & Technology",
    "Cookbooks, Food & Wine",
    "Crafts, Hobbies & Home",
    "Christian Books & Bibles",
    "Engineering & Transportation",
    "Health, Fitness & Dieting",
    "History",
    "Humor & Entertainment",
    "Law",
    "Literature & Fiction",
    "Medical Books",
    "Mystery, Thriller & Suspense",
    "Parenting & Relationships",
    "Politics & Social Sciences",
    "Reference",
    "Religion & Spirituality",
    "Romance",
    "Science & Math",
    "Science Fiction & Fantasy",
    "Self-Help",
    "Sports & Outdoors",
    "Teen & Young Adult",
    "Test Preparation",
    "Travel",
)

EXCLUDED = ("Education & Teaching", "Gay & Lesbian")

DEFAULT_CLASS_TABLE = {i: name for i, name in enumerate(GENRES + EXCLUDED)}

PER_CLASS = 1900
EXPERIMENT_CLASSES = 30
